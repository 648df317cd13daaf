//! Named parameter store, initialization and embedding loading.

use std::io::{BufRead, Write};

use indexmap::IndexMap;
use rand::Rng;

use super::{ModelConfig, SeqModelError};
use crate::autodiff::{read_tensors, write_tensor, Tensor};
use crate::corpus::Vocabulary;

/// Half-width of the uniform range used for embedding rows.
pub const EMBEDDING_INIT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zero,
    /// uniform(-a, a)
    Uniform(f64),
}

/// Name, shape and initializer of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParameters {
    tensors: IndexMap<String, Tensor>,
}

impl ModelParameters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<(), SeqModelError> {
        let name = name.into();
        if !t.is_finite() {
            return Err(SeqModelError::NonFiniteParameter(name));
        }
        if self.tensors.contains_key(&name) {
            return Err(SeqModelError::DuplicateParameter(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, SeqModelError> {
        self.get(name).ok_or_else(|| SeqModelError::MissingParameter(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Every spec initialized in order from `rng`.
    pub fn initialize<R: Rng>(specs: &[ParamSpec], rng: &mut R) -> Result<Self, SeqModelError> {
        let mut out = Self::new();
        for spec in specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zero => vec![0.0; n],
                Init::Uniform(a) => (0..n).map(|_| rng.random_range(-a..a)).collect(),
            };
            out.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
        }
        Ok(out)
    }

    /// Same names and shapes as `config` expects.
    pub fn check_against(&self, config: &ModelConfig) -> Result<(), SeqModelError> {
        let specs = config.parameter_specs();
        for spec in &specs {
            let t = self.require(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(SeqModelError::ParameterShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.names().find(|n| !specs.iter().any(|s| s.name == *n)) {
            return Err(SeqModelError::UnexpectedParameter(extra.to_string()));
        }
        Ok(())
    }

    pub fn write<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        for (name, t) in &self.tensors {
            write_tensor(out, name, t)?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self, SeqModelError> {
        let mut out = Self::new();
        for (name, t) in read_tensors(reader)? {
            out.insert(name, t)?;
        }
        Ok(out)
    }
}

/// `V x dim` embedding matrix. Rows for words found in the file are copied
/// from it; every other row is drawn uniform(-0.1, 0.1) from `rng`. Lines are
/// `word v1 ... v_dim`.
pub fn load_embeddings<R: BufRead, G: Rng>(
    reader: R,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut G,
) -> Result<Tensor, SeqModelError> {
    let v = vocab.len();
    let data: Vec<f64> = (0..v * dim)
        .map(|_| rng.random_range(-EMBEDDING_INIT..EMBEDDING_INIT))
        .collect();
    let mut table = Tensor::new(vec![v, dim], data)?;
    for (k, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = k + 1;
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else {
            continue;
        };
        let values = parts
            .map(|s| {
                s.parse::<f64>().map_err(|e| SeqModelError::Embedding {
                    line: lineno,
                    reason: format!("bad value `{s}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != dim {
            return Err(SeqModelError::EmbeddingDim {
                line: lineno,
                expected: dim,
                found: values.len(),
            });
        }
        if let Some(&bad) = values.iter().find(|x| !x.is_finite()) {
            return Err(SeqModelError::Embedding {
                line: lineno,
                reason: format!("non-finite value {bad}"),
            });
        }
        if let Some(id) = vocab.get(word) {
            table.data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        }
    }
    Ok(table)
}
