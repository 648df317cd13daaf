//! Run configuration: `key = value` lines with `#` comments, layered as
//! defaults < file < command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use kgrg::attention::AttentionVariant;
use kgrg::corpus::{Limits, MAX_CONTEXT_TOKENS, MAX_FACT_TOKENS, MAX_RESPONSE_TOKENS};
use kgrg::cvae::{AnnealSchedule, DEFAULT_RAMP_STEPS};
use kgrg::seqmodel::{
    BeamConfig, ModelConfig, ModelDims, ZInjection, EMBEDDING_DIM, FEATURE_MAPS, HIDDEN_DIM, LATENT_DIM,
    RECOGNITION_DIM,
};
use kgrg::training::{AdamConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Preprocess,
    Train,
    Generate,
    Evaluate,
    Chat,
}

use Command::*;

pub struct KeySpec {
    pub name: &'static str,
    pub doc: &'static str,
    pub used_by: &'static [Command],
    /// Part of the checkpoint fingerprint: changing it changes what
    /// training computes.
    pub fingerprinted: bool,
}

const fn key(name: &'static str, doc: &'static str, used_by: &'static [Command], fingerprinted: bool) -> KeySpec {
    KeySpec {
        name,
        doc,
        used_by,
        fingerprinted,
    }
}

pub const KEYS: &[KeySpec] = &[
    key("attention", "baseline | context-only | parallel | context-guided", &[Train], true),
    key("cvae", "latent-variable decoder (true/false)", &[Train], true),
    key("z_injection", "per-step | init-only", &[Train], true),
    key("embed_dim", "word embedding width (fixed at 100)", &[Train], true),
    key("hidden_dim", "GRU and attention width (fixed at 128)", &[Train], true),
    key("latent_dim", "latent z width", &[Train], true),
    key("recognition_dim", "recognition network hidden width", &[Train], true),
    key("feature_maps", "fact CNN feature maps per kernel width", &[Train], true),
    key("kl_ramp_steps", "steps for the KL weight to ramp linearly from 0 to 1", &[Train], true),
    key("seed", "master seed for every random stream", &[Train, Generate, Chat], true),
    key("learning_rate", "Adam step size", &[Train], true),
    key("adam_beta1", "Adam first-moment decay", &[Train], true),
    key("adam_beta2", "Adam second-moment decay", &[Train], true),
    key("adam_eps", "Adam denominator epsilon", &[Train], true),
    key("batch_size", "examples per update", &[Train], true),
    key("clip_norm", "global gradient-norm clip", &[Train], true),
    key("freeze_embeddings", "keep the embedding table fixed", &[Train], true),
    key("embeddings", "pretrained `word v1 .. v100` file (empty = random init)", &[Train], true),
    key("train_steps", "total optimizer steps", &[Train], false),
    key("checkpoint_every", "steps between checkpoints (0 = final only)", &[Train], false),
    key("log_every", "steps between run-log lines", &[Train], false),
    key("max_context_tokens", "context truncation length", &[Preprocess, Chat], false),
    key("max_fact_tokens", "fact truncation length", &[Preprocess, Chat], false),
    key("max_response_tokens", "response filter and decode length", &[Preprocess, Generate, Chat], false),
    key("vocab_min_count", "minimum token count to enter the vocabulary", &[Preprocess], false),
    key("test_fraction", "share of conversations held out for testing", &[Preprocess], false),
    key("beam_width", "beam size (1 = greedy)", &[Generate, Chat], false),
    key("length_normalize", "rank finished beams by mean log-probability", &[Generate, Chat], false),
    key("bleu_smoothing", "add-epsilon smoothing of empty BLEU orders", &[Evaluate], false),
];

pub fn keys_for(cmd: Command) -> impl Iterator<Item = &'static KeySpec> {
    KEYS.iter().filter(move |k| k.used_by.contains(&cmd))
}

/// Where a setting came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    Line(usize),
    Flag,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Origin::Line(n) => write!(f, "line {n}"),
            Origin::Flag => f.write_str("command line"),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{origin}: unknown key `{key}`")]
    UnknownKey { key: String, origin: Origin },
    #[error("{origin}: {key}: {reason}")]
    Value { key: String, origin: Origin, reason: String },
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub attention: AttentionVariant,
    pub cvae: bool,
    pub z_injection: ZInjection,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
    pub recognition_dim: usize,
    pub feature_maps: usize,
    pub kl_ramp_steps: u64,
    pub seed: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub freeze_embeddings: bool,
    pub embeddings: Option<PathBuf>,
    pub train_steps: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub max_context_tokens: usize,
    pub max_fact_tokens: usize,
    pub max_response_tokens: usize,
    pub vocab_min_count: usize,
    pub test_fraction: f64,
    pub beam_width: usize,
    pub length_normalize: bool,
    pub bleu_smoothing: bool,
}

impl Default for Config {
    fn default() -> Self {
        let adam = AdamConfig::default();
        let train = TrainConfig::default();
        let beam = BeamConfig::default();
        Self {
            attention: AttentionVariant::ContextGuided,
            cvae: false,
            z_injection: ZInjection::PerStep,
            embed_dim: EMBEDDING_DIM,
            hidden_dim: HIDDEN_DIM,
            latent_dim: LATENT_DIM,
            recognition_dim: RECOGNITION_DIM,
            feature_maps: FEATURE_MAPS,
            kl_ramp_steps: DEFAULT_RAMP_STEPS,
            seed: train.seed,
            learning_rate: adam.lr,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_eps: adam.eps,
            batch_size: train.batch_size,
            clip_norm: train.clip_norm,
            freeze_embeddings: false,
            embeddings: None,
            train_steps: 10_000,
            checkpoint_every: 1_000,
            log_every: 100,
            max_context_tokens: MAX_CONTEXT_TOKENS,
            max_fact_tokens: MAX_FACT_TOKENS,
            max_response_tokens: MAX_RESPONSE_TOKENS,
            vocab_min_count: 1,
            test_fraction: 0.1,
            beam_width: beam.beam_width,
            length_normalize: beam.length_normalize,
            bleu_smoothing: true,
        }
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(format!("invalid value `{v}` (expected true or false)")),
    }
}

fn parse_positive(v: &str) -> Result<usize, String> {
    match v.parse::<usize>() {
        Ok(n) if n > 0 => Ok(n),
        _ => Err(format!("invalid value `{v}` (expected a positive integer)")),
    }
}

fn parse_count(v: &str) -> Result<u64, String> {
    v.parse::<u64>()
        .map_err(|_| format!("invalid value `{v}` (expected a non-negative integer)"))
}

fn parse_real(v: &str, ok: impl Fn(f64) -> bool, expected: &str) -> Result<f64, String> {
    match v.parse::<f64>() {
        Ok(x) if x.is_finite() && ok(x) => Ok(x),
        _ => Err(format!("invalid value `{v}` (expected {expected})")),
    }
}

fn parse_fixed(v: &str, fixed: usize) -> Result<usize, String> {
    match v.parse::<usize>() {
        Ok(n) if n == fixed => Ok(n),
        Ok(_) => Err(format!("must be {fixed}; the architecture fixes this width")),
        Err(_) => Err(format!("invalid value `{v}` (expected {fixed})")),
    }
}

impl Config {
    /// Assign one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str, origin: Origin) -> Result<(), ConfigError> {
        let v = value.trim();
        let r: Result<(), String> = (|| {
            match key {
                "attention" => self.attention = v.parse()?,
                "cvae" => self.cvae = parse_bool(v)?,
                "z_injection" => self.z_injection = v.parse()?,
                "embed_dim" => self.embed_dim = parse_fixed(v, EMBEDDING_DIM)?,
                "hidden_dim" => self.hidden_dim = parse_fixed(v, HIDDEN_DIM)?,
                "latent_dim" => self.latent_dim = parse_positive(v)?,
                "recognition_dim" => self.recognition_dim = parse_positive(v)?,
                "feature_maps" => self.feature_maps = parse_positive(v)?,
                "kl_ramp_steps" => self.kl_ramp_steps = parse_positive(v)? as u64,
                "seed" => self.seed = parse_count(v)?,
                "learning_rate" => self.learning_rate = parse_real(v, |x| x > 0.0, "a positive number")?,
                "adam_beta1" => self.adam_beta1 = parse_real(v, |x| (0.0..1.0).contains(&x), "a number in [0, 1)")?,
                "adam_beta2" => self.adam_beta2 = parse_real(v, |x| (0.0..1.0).contains(&x), "a number in [0, 1)")?,
                "adam_eps" => self.adam_eps = parse_real(v, |x| x > 0.0, "a positive number")?,
                "batch_size" => self.batch_size = parse_positive(v)?,
                "clip_norm" => self.clip_norm = parse_real(v, |x| x > 0.0, "a positive number")?,
                "freeze_embeddings" => self.freeze_embeddings = parse_bool(v)?,
                "embeddings" => self.embeddings = (!v.is_empty()).then(|| PathBuf::from(v)),
                "train_steps" => self.train_steps = parse_count(v)?,
                "checkpoint_every" => self.checkpoint_every = parse_count(v)?,
                "log_every" => self.log_every = parse_positive(v)? as u64,
                "max_context_tokens" => self.max_context_tokens = parse_positive(v)?,
                "max_fact_tokens" => self.max_fact_tokens = parse_positive(v)?,
                "max_response_tokens" => self.max_response_tokens = parse_positive(v)?,
                "vocab_min_count" => self.vocab_min_count = parse_positive(v)?,
                "test_fraction" => self.test_fraction = parse_real(v, |x| (0.0..1.0).contains(&x), "a number in [0, 1)")?,
                "beam_width" => self.beam_width = parse_positive(v)?,
                "length_normalize" => self.length_normalize = parse_bool(v)?,
                "bleu_smoothing" => self.bleu_smoothing = parse_bool(v)?,
                _ => return Err(String::new()),
            }
            Ok(())
        })();
        r.map_err(|reason| {
            if KEYS.iter().any(|k| k.name == key) {
                ConfigError::Value {
                    key: key.to_string(),
                    origin: origin.clone(),
                    reason,
                }
            } else {
                ConfigError::UnknownKey {
                    key: key.to_string(),
                    origin: origin.clone(),
                }
            }
        })
    }

    /// Apply every `key = value` line of `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or(ConfigError::Syntax { line })?;
            let k = k.trim();
            if k.is_empty() {
                return Err(ConfigError::Syntax { line });
            }
            self.set(k, v, Origin::Line(line))?;
        }
        Ok(())
    }

    pub fn from_str_with_defaults(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_str(text)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str_with_defaults(&text)
    }

    /// Canonical text of one key's value; `set(key, get(key))` is a no-op.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "attention" => self.attention.to_string(),
            "cvae" => self.cvae.to_string(),
            "z_injection" => self.z_injection.to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "recognition_dim" => self.recognition_dim.to_string(),
            "feature_maps" => self.feature_maps.to_string(),
            "kl_ramp_steps" => self.kl_ramp_steps.to_string(),
            "seed" => self.seed.to_string(),
            "learning_rate" => format!("{:?}", self.learning_rate),
            "adam_beta1" => format!("{:?}", self.adam_beta1),
            "adam_beta2" => format!("{:?}", self.adam_beta2),
            "adam_eps" => format!("{:?}", self.adam_eps),
            "batch_size" => self.batch_size.to_string(),
            "clip_norm" => format!("{:?}", self.clip_norm),
            "freeze_embeddings" => self.freeze_embeddings.to_string(),
            "embeddings" => self
                .embeddings
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "train_steps" => self.train_steps.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "log_every" => self.log_every.to_string(),
            "max_context_tokens" => self.max_context_tokens.to_string(),
            "max_fact_tokens" => self.max_fact_tokens.to_string(),
            "max_response_tokens" => self.max_response_tokens.to_string(),
            "vocab_min_count" => self.vocab_min_count.to_string(),
            "test_fraction" => format!("{:?}", self.test_fraction),
            "beam_width" => self.beam_width.to_string(),
            "length_normalize" => self.length_normalize.to_string(),
            "bleu_smoothing" => self.bleu_smoothing.to_string(),
            _ => return None,
        })
    }

    /// Every key as a `key = value` line, in table order.
    pub fn render(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{} = {}\n", k.name, self.get(k.name).unwrap_or_default()))
            .collect()
    }

    /// Hex digest of the settings that shape training, so a checkpoint can
    /// refuse to resume under a different setup.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for k in KEYS.iter().filter(|k| k.fingerprinted) {
            h.update(k.name.as_bytes());
            h.update(b"=");
            h.update(self.get(k.name).unwrap_or_default().as_bytes());
            h.update(b"\n");
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            dims: ModelDims {
                vocab,
                embed: self.embed_dim,
                hidden: self.hidden_dim,
                latent: self.latent_dim,
                recognition: self.recognition_dim,
                feature_maps: self.feature_maps,
            },
            variant: self.attention,
            cvae: self.cvae,
            z_injection: self.z_injection,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            adam: AdamConfig {
                lr: self.learning_rate,
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
            kl_schedule: AnnealSchedule::new(self.kl_ramp_steps).expect("kl_ramp_steps is validated positive"),
            freeze_embeddings: self.freeze_embeddings,
        }
    }

    pub fn beam_config(&self) -> BeamConfig {
        BeamConfig {
            beam_width: self.beam_width,
            max_len: self.max_response_tokens,
            length_normalize: self.length_normalize,
        }
    }

    pub fn limits(&self) -> Limits {
        Limits {
            context: self.max_context_tokens,
            fact: self.max_fact_tokens,
            response: self.max_response_tokens,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_str_with_defaults("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.beam_width, 8);
        assert_eq!(c.hidden_dim, 128);
        assert_eq!(c.max_context_tokens, 100);
        assert_eq!(c.max_fact_tokens, 500);
        assert_eq!(c.max_response_tokens, 20);
    }

    #[test]
    fn comments_and_blank_lines() {
        let c = Config::from_str_with_defaults("# header\n\nbeam_width = 3  # trailing\n  cvae=true\n").unwrap();
        assert_eq!(c.beam_width, 3);
        assert!(c.cvae);
    }

    #[test]
    fn flag_overrides_file() {
        let mut c = Config::from_str_with_defaults("beam_width = 8\n").unwrap();
        c.set("beam_width", "1", Origin::Flag).unwrap();
        assert_eq!(c.beam_width, 1);
    }

    #[test]
    fn bad_value_reports_key_and_line() {
        let e = Config::from_str_with_defaults("seed = 4\nbeam_width = banana\n").unwrap_err();
        match &e {
            ConfigError::Value { key, origin, .. } => {
                assert_eq!(key, "beam_width");
                assert_eq!(*origin, Origin::Line(2));
            }
            other => panic!("unexpected {other:?}"),
        }
        let msg = e.to_string();
        assert!(msg.contains("line 2") && msg.contains("beam_width"), "{msg}");
    }

    #[test]
    fn unknown_key_and_syntax() {
        let e = Config::from_str_with_defaults("\nbeam_size = 2\n").unwrap_err();
        assert!(matches!(e, ConfigError::UnknownKey { ref key, origin: Origin::Line(2) } if key == "beam_size"));
        let e = Config::from_str_with_defaults("just words\n").unwrap_err();
        assert!(matches!(e, ConfigError::Syntax { line: 1 }));
    }

    #[test]
    fn fixed_widths_are_enforced() {
        assert!(Config::from_str_with_defaults("hidden_dim = 128").is_ok());
        assert!(Config::from_str_with_defaults("hidden_dim = 64").is_err());
        assert!(Config::from_str_with_defaults("embed_dim = 50").is_err());
        assert!(Config::from_str_with_defaults("beam_width = 0").is_err());
        assert!(Config::from_str_with_defaults("learning_rate = nan").is_err());
    }

    #[test]
    fn render_round_trips() {
        let mut c = Config::default();
        c.apply_str("attention = parallel\ncvae = true\nlearning_rate = 0.0005\nembeddings = glove.txt\n")
            .unwrap();
        let back = Config::from_str_with_defaults(&c.render()).unwrap();
        assert_eq!(back, c);
        for k in KEYS {
            assert!(c.get(k.name).is_some(), "{}", k.name);
        }
    }

    #[test]
    fn fingerprint_tracks_training_keys_only() {
        let a = Config::default();
        let mut b = a.clone();
        b.train_steps = 5;
        b.beam_width = 1;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.attention = AttentionVariant::Parallel;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint().len(), 16);
    }

    #[test]
    fn every_key_is_consumed_somewhere() {
        for k in KEYS {
            assert!(!k.used_by.is_empty(), "{}", k.name);
        }
    }
}
