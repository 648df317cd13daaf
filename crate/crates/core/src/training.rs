//! Teacher-forced training: batch objective, gradient clipping, Adam and
//! checkpoints.
//!
//! Every random draw of a step (batch order, latent noise) comes from
//! streams keyed by the seed and the step number, so a checkpoint needs only
//! the seed and step to resume bit-identically.

use std::io::{BufRead, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;

use crate::autodiff::{write_tensor, AutodiffError, Graph, Tensor, TensorReader, Var};
use crate::corpus::ProcessedExample;
use crate::cvae::{anneal_weight, sample_prior, AnnealSchedule};
use crate::rng::{stream, Purpose};
use crate::seqmodel::{LatentInput, Model, ModelConfig, ModelDims, ModelParameters, ModelVars, SeqModelError};

pub const CHECKPOINT_MAGIC: &str = "kgrg-ckpt";
pub const CHECKPOINT_VERSION: &str = "v1";

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error(transparent)]
    Model(#[from] SeqModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("gradient of `{0}` is not finite")]
    NonFiniteGradient(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint tensor `{0}` is not expected here")]
    UnexpectedTensor(String),
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    Fingerprint { expected: String, found: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainingError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter and the update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, Tensor>,
    pub v: IndexMap<String, Tensor>,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
                .collect::<IndexMap<_, _>>()
        };
        Self {
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

pub type NamedGradients = IndexMap<String, Tensor>;

/// One bias-corrected Adam update of every parameter that has a gradient.
/// Nothing is modified when any gradient is non-finite.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &NamedGradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(TrainingError::NonFiniteGradient(name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        let m = state.m.get_mut(name).expect("moment per parameter");
        let v = state.v.get_mut(name).expect("moment per parameter");
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *pi -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut NamedGradients, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// `(sum of token NLL + w * sum of per-example KL) / tokens`.
pub struct BatchObjective {
    pub loss: Var,
    pub nll_sum: f64,
    pub kl_sum: f64,
    pub tokens: usize,
}

/// `noise[i]` is the reparameterization noise of `batch[i]`; ignored when
/// the model has no latent path.
pub fn batch_objective(
    g: &mut Graph<'_>,
    vars: &ModelVars,
    batch: &[ProcessedExample],
    noise: &[Vec<f64>],
    kl_weight: f64,
) -> Result<BatchObjective> {
    if batch.is_empty() {
        return Err(TrainingError::EmptyBatch);
    }
    let mut total: Option<Var> = None;
    let (mut nll_sum, mut kl_sum, mut tokens) = (0.0, 0.0, 0);
    for (i, ex) in batch.iter().enumerate() {
        let latent = if vars.config.cvae {
            LatentInput::Posterior(&noise[i])
        } else {
            LatentInput::None
        };
        let l = vars.example_loss(g, ex, latent)?;
        nll_sum += g.value(l.nll).item();
        tokens += l.tokens;
        let mut term = l.nll;
        if let Some(kl) = l.kl {
            kl_sum += g.value(kl).item();
            let weighted = g.scale(kl, kl_weight)?;
            term = g.add(term, weighted)?;
        }
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    let loss = g.scale(total.expect("non-empty batch"), 1.0 / tokens as f64)?;
    Ok(BatchObjective {
        loss,
        nll_sum,
        kl_sum,
        tokens,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub kl_schedule: AnnealSchedule,
    pub freeze_embeddings: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            adam: AdamConfig::default(),
            batch_size: 8,
            clip_norm: 5.0,
            kl_schedule: AnnealSchedule::default(),
            freeze_embeddings: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    /// Objective value before the update.
    pub loss: f64,
    /// Mean NLL per target token.
    pub nll: f64,
    /// Mean KL per example; 0 without a latent path.
    pub kl: f64,
    pub kl_weight: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub nll: f64,
    pub kl: f64,
    pub tokens: usize,
}

/// Indices of the batch used at `step`: each epoch walks a fresh
/// permutation of the data in consecutive slices.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch_size.max(1)).max(1) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Shuffle, epoch));
    let start = pos * batch_size;
    order[start..(start + batch_size).min(n)].to_vec()
}

/// Reparameterization noise for each example of the batch at `step`.
pub fn latent_noise(seed: u64, step: u64, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Purpose::Latent, step);
    (0..count).map(|_| sample_prior(&mut rng, dim)).collect()
}

pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    pub config: TrainConfig,
    /// Opaque digest of the settings a checkpoint must agree with.
    pub fingerprint: String,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, fingerprint: impl Into<String>) -> Self {
        let adam = AdamState::new(&model.params);
        Self {
            model,
            adam,
            step: 0,
            config,
            fingerprint: fingerprint.into(),
        }
    }

    /// One update on `batch` with the noise and KL weight of the current step.
    pub fn train_step(&mut self, batch: &[ProcessedExample]) -> Result<StepStats> {
        let mcfg = self.model.config;
        let noise = if mcfg.cvae {
            latent_noise(self.config.seed, self.step, batch.len(), mcfg.dims.latent)
        } else {
            Vec::new()
        };
        let kl_weight = if mcfg.cvae {
            anneal_weight(self.step, &self.config.kl_schedule)
        } else {
            0.0
        };
        let freeze = self.config.freeze_embeddings;
        let (mut grads, obj_loss, nll_sum, kl_sum, tokens) = {
            let mut g = Graph::new();
            let vars = ModelVars::bind(
                &mut g,
                &mcfg,
                &self.model.params,
                |n| !(freeze && n == "embedding"),
                None,
            )?;
            let obj = batch_objective(&mut g, &vars, batch, &noise, kl_weight)?;
            let mut back = g.backward(obj.loss)?;
            let mut grads = NamedGradients::new();
            for (name, var) in &vars.leaves {
                if let Some(t) = back.take(*var) {
                    grads.insert(name.clone(), t);
                }
            }
            (grads, g.value(obj.loss).item(), obj.nll_sum, obj.kl_sum, obj.tokens)
        };
        let grad_norm = clip_gradients(&mut grads, self.config.clip_norm);
        adam_step(&mut self.model.params, &grads, &mut self.adam, &self.config.adam)?;
        let stats = StepStats {
            step: self.step,
            loss: obj_loss,
            nll: nll_sum / tokens as f64,
            kl: kl_sum / batch.len() as f64,
            kl_weight,
            grad_norm,
            tokens,
        };
        self.step += 1;
        Ok(stats)
    }

    /// [`Self::train_step`] on this step's batch from `data`.
    pub fn train_on(&mut self, data: &[ProcessedExample]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(TrainingError::EmptyBatch);
        }
        let idx = batch_indices(data.len(), self.config.batch_size, self.config.seed, self.step);
        let batch: Vec<ProcessedExample> = idx.into_iter().map(|i| data[i].clone()).collect();
        self.train_step(&batch)
    }

    pub fn evaluate(&self, data: &[ProcessedExample]) -> Result<EvalStats> {
        evaluate(&self.model, data)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            seed: self.config.seed,
            fingerprint: self.fingerprint.clone(),
            model_config: self.model.config,
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Continue from `ckpt`, which must carry this trainer's fingerprint.
    pub fn resume(config: TrainConfig, fingerprint: &str, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.fingerprint != fingerprint {
            return Err(TrainingError::Fingerprint {
                expected: fingerprint.to_string(),
                found: ckpt.fingerprint,
            });
        }
        let model = Model::from_parameters(ckpt.model_config, ckpt.params)?;
        Ok(Self {
            model,
            adam: ckpt.adam,
            step: ckpt.step,
            config: TrainConfig {
                seed: ckpt.seed,
                ..config
            },
            fingerprint: ckpt.fingerprint,
        })
    }
}

/// Per-token NLL over `data` without updating anything. Latent models use
/// the posterior mean (zero noise).
pub fn evaluate(model: &Model, data: &[ProcessedExample]) -> Result<EvalStats> {
    let zero = vec![0.0; model.config.dims.latent];
    let (mut nll, mut kl, mut tokens) = (0.0, 0.0, 0);
    for ex in data {
        let mut g = Graph::new();
        let vars = model.bind_frozen(&mut g)?;
        let latent = if model.config.cvae {
            LatentInput::Posterior(&zero)
        } else {
            LatentInput::None
        };
        let l = vars.example_loss(&mut g, ex, latent)?;
        nll += g.value(l.nll).item();
        tokens += l.tokens;
        if let Some(k) = l.kl {
            kl += g.value(k).item();
        }
    }
    Ok(EvalStats {
        nll: nll / tokens.max(1) as f64,
        kl: kl / data.len().max(1) as f64,
        tokens,
    })
}

/// Everything needed to resume training or to decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    pub fingerprint: String,
    pub model_config: ModelConfig,
    pub params: ModelParameters,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, out: &mut W) -> Result<()> {
        let c = &self.model_config;
        let d = &c.dims;
        writeln!(
            out,
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} step={} seed={} adam_t={} fingerprint={} variant={} cvae={} \
             z_injection={} vocab={} embed={} hidden={} latent={} recognition={} feature_maps={}",
            self.step,
            self.seed,
            self.adam.t,
            self.fingerprint,
            c.variant,
            c.cvae,
            c.z_injection,
            d.vocab,
            d.embed,
            d.hidden,
            d.latent,
            d.recognition,
            d.feature_maps
        )?;
        self.params.write(out)?;
        for (name, t) in &self.adam.m {
            write_tensor(out, &format!("adam.m.{name}"), t)?;
        }
        for (name, t) in &self.adam.v {
            write_tensor(out, &format!("adam.v.{name}"), t)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(TrainingError::Header(format!("missing `{CHECKPOINT_MAGIC}` tag")));
        }
        if parts.next() != Some(CHECKPOINT_VERSION) {
            return Err(TrainingError::Header(format!("unsupported version, expected {CHECKPOINT_VERSION}")));
        }
        let mut fields = IndexMap::new();
        for kv in parts {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| TrainingError::Header(format!("expected key=value, found `{kv}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| -> Result<&str> {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| TrainingError::Header(format!("missing `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| TrainingError::Header(format!("bad value `{v}` for `{k}`")))
        }
        let n = |k: &str| -> Result<usize> { num(k, field(k)?) };
        let model_config = ModelConfig {
            dims: ModelDims {
                vocab: n("vocab")?,
                embed: n("embed")?,
                hidden: n("hidden")?,
                latent: n("latent")?,
                recognition: n("recognition")?,
                feature_maps: n("feature_maps")?,
            },
            variant: field("variant")?.parse().map_err(TrainingError::Header)?,
            cvae: num("cvae", field("cvae")?)?,
            z_injection: field("z_injection")?.parse().map_err(TrainingError::Header)?,
        };
        let step: u64 = num("step", field("step")?)?;
        let seed: u64 = num("seed", field("seed")?)?;
        let adam_t: u64 = num("adam_t", field("adam_t")?)?;
        let fingerprint = field("fingerprint")?.to_string();

        let specs = model_config.parameter_specs();
        let mut tensors = IndexMap::new();
        let mut tr = TensorReader::new(reader);
        while let Some((name, t)) = tr.next_tensor()? {
            tensors.insert(name, t);
        }
        let mut take = |name: String, shape: &[usize]| -> Result<Tensor> {
            let t = tensors.shift_remove(&name).ok_or(TrainingError::MissingTensor(name.clone()))?;
            if t.shape() != shape {
                return Err(SeqModelError::ParameterShape {
                    name,
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
            Ok(t)
        };
        let mut params = ModelParameters::new();
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for s in &specs {
            params.insert(s.name.clone(), take(s.name.clone(), &s.shape)?)?;
        }
        for s in &specs {
            m.insert(s.name.clone(), take(format!("adam.m.{}", s.name), &s.shape)?);
        }
        for s in &specs {
            v.insert(s.name.clone(), take(format!("adam.v.{}", s.name), &s.shape)?);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(TrainingError::UnexpectedTensor(extra.clone()));
        }
        Ok(Self {
            step,
            seed,
            fingerprint,
            model_config,
            params,
            adam: AdamState { t: adam_t, m, v },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}
