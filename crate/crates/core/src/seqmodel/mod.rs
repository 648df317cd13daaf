//! Attentional encoder-decoder: embeddings, bidirectional GRU context and
//! response encoders, a CNN fact encoder, a two-layer GRU decoder with a
//! vocabulary projection, and beam search.

mod beam;
mod check;
mod layers;
mod model;
mod params;

use std::fmt;
use std::str::FromStr;

pub use beam::{beam_search, exhaustive_search, greedy_decode, BeamConfig, Hypothesis, StepModel};
pub use layers::{
    bigru_layer, decoder_init, encode_context, encode_facts, encode_response, gru_cell, run_gru, GruVars, Linear,
};
pub use model::{
    DecoderState, DecoderVars, Encoded, ExampleLoss, LatentInput, Model, ModelVars, NeuralStepper, StepTrace,
};
pub use params::{load_embeddings, Init, ModelParameters, ParamSpec, EMBEDDING_INIT};

use crate::attention::AttentionVariant;
use crate::autodiff::AutodiffError;

pub const EMBEDDING_DIM: usize = 100;
pub const HIDDEN_DIM: usize = 128;
pub const LATENT_DIM: usize = 64;
pub const RECOGNITION_DIM: usize = 256;
pub const FEATURE_MAPS: usize = 128;
pub const KERNEL_WIDTHS: [usize; 3] = [1, 2, 3];
pub const GRU_LAYERS: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum SeqModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
    #[error("token id {id} out of range for a vocabulary of {vocab}")]
    TokenRange { id: usize, vocab: usize },
    #[error("dimension mismatch at line {line}: expected {expected} values, found {found}")]
    EmbeddingDim { line: usize, expected: usize, found: usize },
    #[error("embedding file line {line}: {reason}")]
    Embedding { line: usize, reason: String },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("parameter `{0}` is not finite")]
    NonFiniteParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("latent input does not match the model: {0}")]
    Latent(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where the latent sample enters the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum ZInjection {
    /// Projected and concatenated into every decoder input.
    #[default]
    PerStep,
    /// Projected and added to the decoder's initial state only.
    InitOnly,
}

impl ZInjection {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PerStep => "per-step",
            Self::InitOnly => "init-only",
        }
    }
}

impl fmt::Display for ZInjection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ZInjection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "per-step" => Ok(Self::PerStep),
            "init-only" => Ok(Self::InitOnly),
            _ => Err(format!("unknown z injection `{s}` (expected per-step or init-only)")),
        }
    }
}

/// Layer widths. The standard model uses the constants above; tests may
/// shrink them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    pub recognition: usize,
    pub feature_maps: usize,
}

impl ModelDims {
    pub fn standard(vocab: usize) -> Self {
        Self {
            vocab,
            embed: EMBEDDING_DIM,
            hidden: HIDDEN_DIM,
            latent: LATENT_DIM,
            recognition: RECOGNITION_DIM,
            feature_maps: FEATURE_MAPS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelConfig {
    pub dims: ModelDims,
    pub variant: AttentionVariant,
    pub cvae: bool,
    pub z_injection: ZInjection,
}

fn gru_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize) {
    let wa = 1.0 / (input as f64).sqrt();
    let ua = 1.0 / (hidden as f64).sqrt();
    for gate in ["z", "r", "h"] {
        out.push(spec(format!("{prefix}.w_{gate}"), &[input, hidden], Init::Uniform(wa)));
    }
    for gate in ["z", "r", "h"] {
        out.push(spec(format!("{prefix}.u_{gate}"), &[hidden, hidden], Init::Uniform(ua)));
    }
    for gate in ["z", "r", "h"] {
        out.push(spec(format!("{prefix}.b_{gate}"), &[1, hidden], Init::Zero));
    }
}

fn bigru_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, hidden: usize) {
    for layer in 0..GRU_LAYERS {
        let inp = if layer == 0 { input } else { 2 * hidden };
        for dir in ["fwd", "bwd"] {
            gru_specs(out, &format!("{prefix}.l{layer}.{dir}"), inp, hidden);
        }
    }
}

fn linear_specs(out: &mut Vec<ParamSpec>, prefix: &str, input: usize, output: usize) {
    let a = 1.0 / (input as f64).sqrt();
    out.push(spec(format!("{prefix}.w"), &[input, output], Init::Uniform(a)));
    out.push(spec(format!("{prefix}.b"), &[1, output], Init::Zero));
}

fn spec(name: String, shape: &[usize], init: Init) -> ParamSpec {
    ParamSpec {
        name,
        shape: shape.to_vec(),
        init,
    }
}

impl ModelConfig {
    pub fn new(vocab: usize, variant: AttentionVariant, cvae: bool) -> Self {
        Self {
            dims: ModelDims::standard(vocab),
            variant,
            cvae,
            z_injection: ZInjection::PerStep,
        }
    }

    /// The fact encoder runs when attention reads the fact or the
    /// recognition network needs a fact summary.
    pub fn uses_facts(&self) -> bool {
        self.variant.uses_facts() || self.cvae
    }

    pub fn decoder_input_dim(&self) -> usize {
        let d = &self.dims;
        let z = if self.cvae && self.z_injection == ZInjection::PerStep {
            d.hidden
        } else {
            0
        };
        d.embed + self.variant.attended_dim(d.hidden) + z
    }

    /// Every tensor this configuration uses, in a fixed order.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let d = &self.dims;
        let (e, h) = (d.embed, d.hidden);
        let mut out = vec![spec("embedding".into(), &[d.vocab, e], Init::Uniform(EMBEDDING_INIT))];
        bigru_specs(&mut out, "ctx_enc", e, h);
        linear_specs(&mut out, "ctx_enc.proj", 2 * h, h);
        if self.uses_facts() {
            for k in KERNEL_WIDTHS {
                linear_specs(&mut out, &format!("fact_enc.conv{k}"), k * e, d.feature_maps);
            }
            linear_specs(&mut out, "fact_enc.proj", KERNEL_WIDTHS.len() * d.feature_maps, h);
        }
        if self.cvae {
            bigru_specs(&mut out, "resp_enc", e, h);
        }
        for layer in 0..GRU_LAYERS {
            linear_specs(&mut out, &format!("dec.init{layer}"), h, h);
        }
        for layer in 0..GRU_LAYERS {
            let inp = if layer == 0 { self.decoder_input_dim() } else { h };
            gru_specs(&mut out, &format!("dec.l{layer}"), inp, h);
        }
        linear_specs(&mut out, "dec.out", h, d.vocab);
        // Scorer biases are not stored: every score feeds a softmax, which is
        // invariant to them, so they are fixed at zero.
        let a = 1.0 / (h as f64).sqrt();
        for name in self.variant.scorer_names() {
            out.push(spec(format!("attn.{name}.v"), &[h, 1], Init::Uniform(a)));
            out.push(spec(format!("attn.{name}.w1"), &[h, h], Init::Uniform(a)));
            out.push(spec(format!("attn.{name}.w2"), &[h, h], Init::Uniform(a)));
        }
        if self.cvae {
            linear_specs(&mut out, "cvae.hidden", 4 * h, d.recognition);
            linear_specs(&mut out, "cvae.mu", d.recognition, d.latent);
            linear_specs(&mut out, "cvae.logvar", d.recognition, d.latent);
            linear_specs(&mut out, "cvae.z_proj", d.latent, h);
        }
        out
    }
}

#[cfg(test)]
mod tests;
