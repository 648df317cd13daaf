//! The full model over a graph: parameter binding, encoding, decoder steps,
//! teacher-forced loss and an inference stepper for beam search.

use indexmap::IndexMap;

use super::layers::{decoder_init, encode_context, encode_facts, encode_response, gru_cell, GruVars, Linear};
use super::{
    beam_search, BeamConfig, Hypothesis, ModelConfig, ModelParameters, SeqModelError, StepModel, ZInjection,
    GRU_LAYERS, KERNEL_WIDTHS,
};
use crate::attention::{attended_vector, AttentionMemory, AttentionOutput, ScorerSet, ScorerVars};
use crate::autodiff::{Graph, Tensor, Var};
use crate::corpus::{ProcessedExample, TokenId, BOS, EOS};
use crate::cvae::{self, LatentPath, RecognitionVars};
use crate::rng::{stream, Purpose};

type Result<T> = std::result::Result<T, SeqModelError>;

#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub init: Vec<Linear>,
    pub layers: Vec<GruVars>,
    pub out: Linear,
}

/// Every parameter of a [`ModelConfig`] bound into one graph.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub config: ModelConfig,
    pub embedding: Var,
    pub ctx_layers: Vec<(GruVars, GruVars)>,
    pub ctx_proj: Linear,
    pub fact_convs: Vec<Linear>,
    pub fact_proj: Option<Linear>,
    pub resp_layers: Vec<(GruVars, GruVars)>,
    pub decoder: DecoderVars,
    pub scorers: ScorerSet,
    pub recognition: Option<RecognitionVars>,
    pub z_proj: Option<Linear>,
    /// Parameter name to graph leaf, in specification order.
    pub leaves: IndexMap<String, Var>,
}

struct Lookup<'m> {
    vars: &'m IndexMap<String, Var>,
    zero_bias: Var,
}

impl Lookup<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| SeqModelError::MissingParameter(name.to_string()))
    }

    fn linear(&self, prefix: &str) -> Result<Linear> {
        Ok(Linear {
            w: self.var(&format!("{prefix}.w"))?,
            b: self.var(&format!("{prefix}.b"))?,
        })
    }

    fn gru(&self, prefix: &str) -> Result<GruVars> {
        let g = |kind: &str| -> Result<[Var; 3]> {
            Ok([
                self.var(&format!("{prefix}.{kind}_z"))?,
                self.var(&format!("{prefix}.{kind}_r"))?,
                self.var(&format!("{prefix}.{kind}_h"))?,
            ])
        };
        Ok(GruVars {
            w: g("w")?,
            u: g("u")?,
            b: g("b")?,
        })
    }

    fn bigru(&self, prefix: &str) -> Result<Vec<(GruVars, GruVars)>> {
        (0..GRU_LAYERS)
            .map(|l| Ok((self.gru(&format!("{prefix}.l{l}.fwd"))?, self.gru(&format!("{prefix}.l{l}.bwd"))?)))
            .collect()
    }

    fn scorer(&self, name: &str) -> Result<ScorerVars> {
        Ok(ScorerVars {
            v: self.var(&format!("attn.{name}.v"))?,
            w1: self.var(&format!("attn.{name}.w1"))?,
            w2: self.var(&format!("attn.{name}.w2"))?,
            b: self.zero_bias,
        })
    }
}

/// Encoder outputs for one example.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `N x h` context states.
    pub context: Var,
    /// `M x h` fact states, when the configuration reads the fact.
    pub fact: Option<Var>,
    pub memory: AttentionMemory,
}

/// Hidden row per decoder layer, bottom first; the top row is the previous
/// output that queries attention.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<Var>,
}

impl DecoderState {
    pub fn output(&self) -> Var {
        *self.layers.last().expect("decoder has layers")
    }
}

/// Attention weights used by one decoder step.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub attention: Option<AttentionOutput>,
}

/// Source of the latent sample for one example.
#[derive(Clone, Copy, Debug)]
pub enum LatentInput<'e> {
    /// Model without a latent path.
    None,
    /// Training: `z` is reparameterized from the recognition network with
    /// this noise.
    Posterior(&'e [f64]),
    /// Generation: this `z` drawn from the standard-normal prior.
    Prior(&'e [f64]),
}

/// Summed token NLL of one example, with its KL term when the latent path
/// is on.
#[derive(Clone, Copy, Debug)]
pub struct ExampleLoss {
    pub nll: Var,
    pub tokens: usize,
    pub kl: Option<Var>,
    pub path: Option<LatentPath>,
}

impl ModelVars {
    /// Bind `params` into `g`. Tensors for which `trainable` holds become
    /// gradient leaves; `replace` substitutes a caller-made leaf for one
    /// named tensor.
    pub fn bind<'a>(
        g: &mut Graph<'a>,
        config: &ModelConfig,
        params: &'a ModelParameters,
        trainable: impl Fn(&str) -> bool,
        replace: Option<(&str, Var)>,
    ) -> Result<Self> {
        let mut leaves = IndexMap::new();
        for spec in config.parameter_specs() {
            let t = params.require(&spec.name)?;
            let v = match replace {
                Some((name, v)) if name == spec.name => v,
                _ if trainable(&spec.name) => g.param(t),
                _ => g.input(t),
            };
            leaves.insert(spec.name, v);
        }
        let l = Lookup {
            vars: &leaves,
            zero_bias: g.constant(Tensor::zeros(&[1, 1])),
        };
        let uses_facts = config.uses_facts();
        let fact_convs = if uses_facts {
            KERNEL_WIDTHS
                .iter()
                .map(|k| l.linear(&format!("fact_enc.conv{k}")))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let scorer = |name: &str| -> Result<Option<ScorerVars>> {
            if config.variant.scorer_names().contains(&name) {
                l.scorer(name).map(Some)
            } else {
                Ok(None)
            }
        };
        let vars = Self {
            config: *config,
            embedding: l.var("embedding")?,
            ctx_layers: l.bigru("ctx_enc")?,
            ctx_proj: l.linear("ctx_enc.proj")?,
            fact_convs,
            fact_proj: if uses_facts { Some(l.linear("fact_enc.proj")?) } else { None },
            resp_layers: if config.cvae { l.bigru("resp_enc")? } else { Vec::new() },
            decoder: DecoderVars {
                init: (0..GRU_LAYERS)
                    .map(|k| l.linear(&format!("dec.init{k}")))
                    .collect::<Result<_>>()?,
                layers: (0..GRU_LAYERS)
                    .map(|k| l.gru(&format!("dec.l{k}")))
                    .collect::<Result<_>>()?,
                out: l.linear("dec.out")?,
            },
            scorers: ScorerSet {
                c: scorer("c")?,
                f: scorer("f")?,
                g: scorer("g")?,
                o: scorer("o")?,
            },
            recognition: if config.cvae {
                Some(RecognitionVars {
                    hidden: l.linear("cvae.hidden")?,
                    mu: l.linear("cvae.mu")?,
                    log_var: l.linear("cvae.logvar")?,
                })
            } else {
                None
            },
            z_proj: if config.cvae { Some(l.linear("cvae.z_proj")?) } else { None },
            leaves: IndexMap::new(),
        };
        Ok(Self { leaves, ..vars })
    }

    pub fn encode(&self, g: &mut Graph<'_>, context: &[TokenId], fact: &[TokenId]) -> Result<Encoded> {
        let hc = encode_context(g, context, self.embedding, &self.ctx_layers, &self.ctx_proj)?;
        let hf = match self.fact_proj {
            Some(proj) => Some(encode_facts(g, fact, self.embedding, &self.fact_convs, &proj)?),
            None => None,
        };
        let memory = AttentionMemory::new(g, self.config.variant, hc, hf, &self.scorers)?;
        Ok(Encoded {
            context: hc,
            fact: hf,
            memory,
        })
    }

    /// Latent row `z` for an example plus its KL node on the posterior path.
    pub fn latent(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        response: &[TokenId],
        latent: LatentInput<'_>,
    ) -> Result<(Option<Var>, Option<Var>, Option<LatentPath>)> {
        let latent_dim = self.config.dims.latent;
        match (self.recognition, latent) {
            (None, LatentInput::None) => Ok((None, None, None)),
            (None, _) => Err(SeqModelError::Latent("model has no latent path")),
            (Some(_), LatentInput::None) => Err(SeqModelError::Latent("latent model needs a latent input")),
            (Some(_), LatentInput::Prior(z) | LatentInput::Posterior(z)) if z.len() != latent_dim => {
                Err(SeqModelError::Latent("latent vector has the wrong dimension"))
            }
            (Some(_), LatentInput::Prior(z)) => {
                let z = g.constant(Tensor::row(z.to_vec()));
                Ok((Some(z), None, Some(LatentPath::Prior)))
            }
            (Some(rec), LatentInput::Posterior(eps)) => {
                let mut ids = response.to_vec();
                ids.push(EOS);
                let r = encode_response(g, &ids, self.embedding, &self.resp_layers)?;
                let cs = g.mean(enc.context, 0)?;
                let fs = g.mean(enc.fact.expect("latent models encode the fact"), 0)?;
                let lp = cvae::recognize(g, r, cs, fs, &rec)?;
                let z = cvae::reparameterize(g, &lp, eps)?;
                let kl = cvae::kl_to_standard_normal(g, &lp)?;
                Ok((Some(z), Some(kl), Some(LatentPath::Posterior)))
            }
        }
    }

    /// `z W + b`, the form in which the latent sample reaches the decoder.
    pub fn project_latent(&self, g: &mut Graph<'_>, z: Option<Var>) -> Result<Option<Var>> {
        match (z, self.z_proj) {
            (Some(z), Some(p)) => Ok(Some(p.apply(g, z)?)),
            _ => Ok(None),
        }
    }

    pub fn initial_state(&self, g: &mut Graph<'_>, enc: &Encoded, z_proj: Option<Var>) -> Result<DecoderState> {
        let extra = match self.config.z_injection {
            ZInjection::InitOnly => z_proj,
            ZInjection::PerStep => None,
        };
        Ok(DecoderState {
            layers: decoder_init(g, enc.context, &self.decoder.init, extra)?,
        })
    }

    /// Recurrent part of one decoder step from the embedded previous token
    /// `x_emb` (`1 x e`).
    pub fn advance(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        state: &DecoderState,
        x_emb: Var,
        z_proj: Option<Var>,
    ) -> Result<(DecoderState, StepTrace)> {
        let attention = enc.memory.attend(g, state.output(), &self.scorers)?;
        let mut parts = vec![x_emb];
        if let Some(a) = &attention {
            parts.push(attended_vector(g, a)?);
        }
        if self.config.z_injection == ZInjection::PerStep {
            if let Some(zp) = z_proj {
                parts.push(zp);
            }
        }
        let mut input = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let mut layers = Vec::with_capacity(state.layers.len());
        for (h, p) in state.layers.iter().zip(&self.decoder.layers) {
            input = gru_cell(g, input, *h, p)?;
            layers.push(input);
        }
        Ok((DecoderState { layers }, StepTrace { attention }))
    }

    /// [`Self::advance`] followed by the vocabulary logits row.
    pub fn step_embedded(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        state: &DecoderState,
        x_emb: Var,
        z_proj: Option<Var>,
    ) -> Result<(Var, DecoderState, StepTrace)> {
        let (next, trace) = self.advance(g, enc, state, x_emb, z_proj)?;
        let logits = self.decoder.out.apply(g, next.output())?;
        Ok((logits, next, trace))
    }

    /// Distribution over the vocabulary after feeding `prev`.
    pub fn decode_step(
        &self,
        g: &mut Graph<'_>,
        enc: &Encoded,
        state: &DecoderState,
        prev: TokenId,
        z_proj: Option<Var>,
    ) -> Result<(Var, DecoderState)> {
        let x = self.embed_tokens(g, &[prev])?;
        let (logits, next, _) = self.step_embedded(g, enc, state, x, z_proj)?;
        Ok((g.softmax(logits, 1)?, next))
    }

    fn embed_tokens(&self, g: &mut Graph<'_>, ids: &[TokenId]) -> Result<Var> {
        let vocab = self.config.dims.vocab;
        if let Some(&id) = ids.iter().find(|&&id| id >= vocab) {
            return Err(SeqModelError::TokenRange { id, vocab });
        }
        Ok(g.gather_rows(self.embedding, ids)?)
    }

    /// Teacher-forced summed NLL of `response + EOS` given `BOS + response`
    /// as decoder inputs.
    pub fn example_loss(
        &self,
        g: &mut Graph<'_>,
        ex: &ProcessedExample,
        latent: LatentInput<'_>,
    ) -> Result<ExampleLoss> {
        let enc = self.encode(g, &ex.context, &ex.fact)?;
        let (z, kl, path) = self.latent(g, &enc, &ex.response, latent)?;
        let zp = self.project_latent(g, z)?;
        let mut inputs = Vec::with_capacity(ex.response.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&ex.response);
        let mut targets = ex.response.clone();
        targets.push(EOS);
        let embedded = self.embed_tokens(g, &inputs)?;
        let mut state = self.initial_state(g, &enc, zp)?;
        let mut tops = Vec::with_capacity(inputs.len());
        for t in 0..inputs.len() {
            let x = g.row(embedded, t)?;
            state = self.advance(g, &enc, &state, x, zp)?.0;
            tops.push(state.output());
        }
        let hidden = g.concat(&tops, 0)?;
        let logits = self.decoder.out.apply(g, hidden)?;
        let logp = g.log_softmax(logits)?;
        let picked = g.pick(logp, &targets)?;
        let total = g.sum_all(picked)?;
        let nll = g.scale(total, -1.0)?;
        Ok(ExampleLoss {
            nll,
            tokens: targets.len(),
            kl,
            path,
        })
    }
}

/// Configuration plus parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParameters,
}

impl Model {
    /// Fresh parameters drawn from the seed's initialization stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Purpose::Init, 0);
        let params = ModelParameters::initialize(&config.parameter_specs(), &mut rng)?;
        Ok(Self { config, params })
    }

    pub fn from_parameters(config: ModelConfig, params: ModelParameters) -> Result<Self> {
        params.check_against(&config)?;
        Ok(Self { config, params })
    }

    /// Bind every tensor as a gradient leaf.
    pub fn bind_trainable<'a>(&'a self, g: &mut Graph<'a>) -> Result<ModelVars> {
        ModelVars::bind(g, &self.config, &self.params, |_| true, None)
    }

    /// Bind every tensor as a constant; no tape is recorded.
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<'a>) -> Result<ModelVars> {
        ModelVars::bind(g, &self.config, &self.params, |_| false, None)
    }

    /// Decoder wrapped for beam search. `z` is required exactly when the
    /// latent path is on.
    pub fn stepper(&self, context: &[TokenId], fact: &[TokenId], z: Option<&[f64]>) -> Result<NeuralStepper<'_>> {
        let mut g = Graph::new();
        let vars = self.bind_frozen(&mut g)?;
        let enc = vars.encode(&mut g, context, fact)?;
        let latent = match z {
            Some(z) => LatentInput::Prior(z),
            None => LatentInput::None,
        };
        let (z, _, path) = vars.latent(&mut g, &enc, &[], latent)?;
        let z_proj = vars.project_latent(&mut g, z)?;
        Ok(NeuralStepper {
            g,
            vars,
            enc,
            z_proj,
            path,
            traces: Vec::new(),
        })
    }

    pub fn generate(
        &self,
        context: &[TokenId],
        fact: &[TokenId],
        z: Option<&[f64]>,
        beam: &BeamConfig,
    ) -> Result<Hypothesis> {
        let mut stepper = self.stepper(context, fact, z)?;
        beam_search(&mut stepper, BOS, EOS, beam)
    }
}

/// Inference-time decoder over a private graph.
pub struct NeuralStepper<'a> {
    pub g: Graph<'a>,
    pub vars: ModelVars,
    pub enc: Encoded,
    z_proj: Option<Var>,
    /// Latent source, always the prior when present.
    pub path: Option<LatentPath>,
    /// Attention of every step taken, in call order.
    pub traces: Vec<StepTrace>,
}

impl StepModel for NeuralStepper<'_> {
    type State = DecoderState;
    type Error = SeqModelError;

    fn start(&mut self) -> Result<DecoderState> {
        self.vars.initial_state(&mut self.g, &self.enc, self.z_proj)
    }

    fn step(&mut self, state: &DecoderState, prev: TokenId) -> Result<(Vec<f64>, DecoderState)> {
        let x = self.vars.embed_tokens(&mut self.g, &[prev])?;
        let (logits, next, trace) = self.vars.step_embedded(&mut self.g, &self.enc, state, x, self.z_proj)?;
        self.traces.push(trace);
        let logp = self.g.log_softmax(logits)?;
        Ok((self.g.value(logp).data().to_vec(), next))
    }
}
