//! Fact-grounded attention.
//!
//! All variants share one additive scorer `v . tanh(q W1 + k W2) + b`:
//!
//! * context-only: attend over the encoded context with the `c` scorer;
//! * parallel: additionally attend over the encoded fact with the `f` scorer;
//! * context-guided: the fact distribution is the mean of a step-dependent
//!   distribution (scorer `o`, queried by the previous decoder output) and a
//!   static prior over fact positions derived from context/fact affinities
//!   (scorer `g`, summed over context positions).
//!
//! Weight matrices are stored input-major (`d x d`), so `q W1` is a plain
//! row-vector product.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{AutodiffError, Graph, Var};

type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionVariant {
    /// Encoder-decoder without attention; the decoder sees no attended vector.
    Baseline,
    ContextOnly,
    Parallel,
    ContextGuided,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [
        AttentionVariant::Baseline,
        AttentionVariant::ContextOnly,
        AttentionVariant::Parallel,
        AttentionVariant::ContextGuided,
    ];

    pub fn uses_facts(self) -> bool {
        matches!(self, Self::Parallel | Self::ContextGuided)
    }

    /// Width of the vector handed to the decoder, for hidden size `d`.
    pub fn attended_dim(self, d: usize) -> usize {
        match self {
            Self::Baseline => 0,
            Self::ContextOnly => d,
            Self::Parallel | Self::ContextGuided => 2 * d,
        }
    }

    /// Names of the scorer parameter sets this variant needs.
    pub fn scorer_names(self) -> &'static [&'static str] {
        match self {
            Self::Baseline => &[],
            Self::ContextOnly => &["c"],
            Self::Parallel => &["c", "f"],
            Self::ContextGuided => &["c", "g", "o"],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::ContextOnly => "context-only",
            Self::Parallel => "parallel",
            Self::ContextGuided => "context-guided",
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttentionVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                format!("unknown attention variant `{s}` (expected baseline, context-only, parallel or context-guided)")
            })
    }
}

/// Graph handles for one additive scorer: `v` is `d x 1`, `w1`/`w2` are
/// `d x d`, `b` is `1 x 1`.
#[derive(Clone, Copy, Debug)]
pub struct ScorerVars {
    pub v: Var,
    pub w1: Var,
    pub w2: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ScorerSet {
    pub c: Option<ScorerVars>,
    pub f: Option<ScorerVars>,
    pub g: Option<ScorerVars>,
    pub o: Option<ScorerVars>,
}

fn need(s: Option<ScorerVars>, name: &'static str) -> Result<ScorerVars> {
    s.ok_or(AutodiffError::Shape {
        op: name,
        shapes: Vec::new(),
    })
}

/// Scores of one query row against precomputed keys `k W2` (`n x d`);
/// returns a `1 x n` row.
fn scores_from_keys(g: &mut Graph<'_>, query: Var, keys: Var, s: &ScorerVars) -> Result<Var> {
    let q = g.matmul(query, s.w1)?;
    let pre = g.add_bias(keys, q)?;
    let t = g.tanh(pre)?;
    let e = g.matmul(t, s.v)?;
    let e = g.add_bias(e, s.b)?;
    g.transpose(e)
}

/// `v . tanh(q W1 + k W2) + b` for one query and one key.
pub fn additive_score(g: &mut Graph<'_>, query: Var, key: Var, s: &ScorerVars) -> Result<Var> {
    let k = g.matmul(key, s.w2)?;
    scores_from_keys(g, query, k, s)
}

/// Attention weights and attended vectors for one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub context_vector: Var,
    pub fact_vector: Option<Var>,
    pub alpha: Var,
    pub beta: Option<Var>,
    pub beta_hat: Option<Var>,
    pub beta_prior: Option<Var>,
}

/// Per-example state that does not depend on the decoding step: encoder
/// outputs, their key projections and, for the context-guided variant, the
/// fact prior.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMemory {
    pub variant: AttentionVariant,
    pub context: Var,
    pub fact: Option<Var>,
    keys_c: Option<Var>,
    keys_f: Option<Var>,
    keys_o: Option<Var>,
    pub beta_prior: Option<Var>,
}

impl AttentionMemory {
    pub fn new(
        g: &mut Graph<'_>,
        variant: AttentionVariant,
        context: Var,
        fact: Option<Var>,
        scorers: &ScorerSet,
    ) -> Result<Self> {
        let mut mem = Self {
            variant,
            context,
            fact,
            keys_c: None,
            keys_f: None,
            keys_o: None,
            beta_prior: None,
        };
        if variant == AttentionVariant::Baseline {
            return Ok(mem);
        }
        let c = need(scorers.c, "attention scorer c")?;
        mem.keys_c = Some(g.matmul(context, c.w2)?);
        match variant {
            AttentionVariant::Parallel => {
                let f = need(scorers.f, "attention scorer f")?;
                let hf = need_fact(fact)?;
                mem.keys_f = Some(g.matmul(hf, f.w2)?);
            }
            AttentionVariant::ContextGuided => {
                let hf = need_fact(fact)?;
                let gs = need(scorers.g, "attention scorer g")?;
                let o = need(scorers.o, "attention scorer o")?;
                mem.beta_prior = Some(fact_prior(g, context, hf, &gs)?);
                mem.keys_o = Some(g.matmul(hf, o.w2)?);
            }
            _ => {}
        }
        Ok(mem)
    }

    /// Attend from the previous decoder output `o_prev` (`1 x d`).
    pub fn attend(&self, g: &mut Graph<'_>, o_prev: Var, scorers: &ScorerSet) -> Result<Option<AttentionOutput>> {
        if self.variant == AttentionVariant::Baseline {
            return Ok(None);
        }
        let c = need(scorers.c, "attention scorer c")?;
        let keys_c = self.keys_c.expect("context keys");
        let e = scores_from_keys(g, o_prev, keys_c, &c)?;
        let alpha = g.softmax(e, 1)?;
        let context_vector = g.matmul(alpha, self.context)?;
        let mut out = AttentionOutput {
            context_vector,
            fact_vector: None,
            alpha,
            beta: None,
            beta_hat: None,
            beta_prior: None,
        };
        match self.variant {
            AttentionVariant::Parallel => {
                let f = need(scorers.f, "attention scorer f")?;
                let m = scores_from_keys(g, o_prev, self.keys_f.expect("fact keys"), &f)?;
                let beta = g.softmax(m, 1)?;
                out.fact_vector = Some(g.matmul(beta, self.fact.expect("fact states"))?);
                out.beta = Some(beta);
            }
            AttentionVariant::ContextGuided => {
                let o = need(scorers.o, "attention scorer o")?;
                let m_hat = scores_from_keys(g, o_prev, self.keys_o.expect("fact keys"), &o)?;
                let beta_hat = g.softmax(m_hat, 1)?;
                let prior = self.beta_prior.expect("fact prior");
                let sum = g.add(beta_hat, prior)?;
                let beta = g.scale(sum, 0.5)?;
                out.fact_vector = Some(g.matmul(beta, self.fact.expect("fact states"))?);
                out.beta = Some(beta);
                out.beta_hat = Some(beta_hat);
                out.beta_prior = Some(prior);
            }
            _ => {}
        }
        Ok(Some(out))
    }
}

fn need_fact(fact: Option<Var>) -> Result<Var> {
    fact.ok_or(AutodiffError::Shape {
        op: "attention: fact states",
        shapes: Vec::new(),
    })
}

/// Attended vector fed to the decoder: the context vector alone, or the
/// context and fact vectors side by side.
pub fn attended_vector(g: &mut Graph<'_>, out: &AttentionOutput) -> Result<Var> {
    match out.fact_vector {
        Some(f) => g.concat(&[out.context_vector, f], 1),
        None => Ok(out.context_vector),
    }
}

/// Context-only attention over `context` (`n x d`).
pub fn context_only(g: &mut Graph<'_>, o_prev: Var, context: Var, c: &ScorerVars) -> Result<AttentionOutput> {
    let scorers = ScorerSet {
        c: Some(*c),
        ..Default::default()
    };
    let mem = AttentionMemory::new(g, AttentionVariant::ContextOnly, context, None, &scorers)?;
    Ok(mem.attend(g, o_prev, &scorers)?.expect("attention output"))
}

/// Independent attention over context and fact.
pub fn parallel(
    g: &mut Graph<'_>,
    o_prev: Var,
    context: Var,
    fact: Var,
    c: &ScorerVars,
    f: &ScorerVars,
) -> Result<AttentionOutput> {
    let scorers = ScorerSet {
        c: Some(*c),
        f: Some(*f),
        ..Default::default()
    };
    let mem = AttentionMemory::new(g, AttentionVariant::Parallel, context, Some(fact), &scorers)?;
    Ok(mem.attend(g, o_prev, &scorers)?.expect("attention output"))
}

/// Static distribution over fact positions: softmax over `j` of
/// `sum_i score_g(h^c_i, h^f_j)`. Returns a `1 x m` row.
pub fn fact_prior(g: &mut Graph<'_>, context: Var, fact: Var, s: &ScorerVars) -> Result<Var> {
    let n = g.value(context).rows();
    let a = g.matmul(context, s.w1)?;
    let b = g.matmul(fact, s.w2)?;
    let mut total: Option<Var> = None;
    for i in 0..n {
        let ai = g.row(a, i)?;
        let pre = g.add_bias(b, ai)?;
        let t = g.tanh(pre)?;
        let col = g.matmul(t, s.v)?;
        let col = g.add_bias(col, s.b)?;
        total = Some(match total {
            None => col,
            Some(acc) => g.add(acc, col)?,
        });
    }
    let total = total.ok_or(AutodiffError::EmptyAxis { op: "fact_prior" })?;
    let row = g.transpose(total)?;
    g.softmax(row, 1)
}

/// Context-guided attention given a precomputed fact prior.
pub fn context_guided(
    g: &mut Graph<'_>,
    o_prev: Var,
    context: Var,
    fact: Var,
    prior: Var,
    c: &ScorerVars,
    o: &ScorerVars,
) -> Result<AttentionOutput> {
    let keys_c = g.matmul(context, c.w2)?;
    let keys_o = g.matmul(fact, o.w2)?;
    let mem = AttentionMemory {
        variant: AttentionVariant::ContextGuided,
        context,
        fact: Some(fact),
        keys_c: Some(keys_c),
        keys_f: None,
        keys_o: Some(keys_o),
        beta_prior: Some(prior),
    };
    let scorers = ScorerSet {
        c: Some(*c),
        o: Some(*o),
        ..Default::default()
    };
    Ok(mem.attend(g, o_prev, &scorers)?.expect("attention output"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scorer(g: &mut Graph<'static>, v: Vec<f64>, w1: Tensor, w2: Tensor, b: f64) -> ScorerVars {
        let d = v.len();
        ScorerVars {
            v: g.constant(Tensor::new(vec![d, 1], v).unwrap()),
            w1: g.constant(w1),
            w2: g.constant(w2),
            b: g.constant(Tensor::scalar(b)),
        }
    }

    fn row(g: &mut Graph<'static>, v: &[f64]) -> Var {
        g.constant(Tensor::row(v.to_vec()))
    }

    #[test]
    fn additive_score_examples() {
        let mut g = Graph::new();
        let s = scorer(&mut g, vec![0.0; 4], Tensor::zeros(&[4, 4]), Tensor::zeros(&[4, 4]), 0.0);
        let q = row(&mut g, &[0.3, -0.2, 0.1, 0.9]);
        let k = row(&mut g, &[1.0, 2.0, 3.0, 4.0]);
        let e = additive_score(&mut g, q, k, &s).unwrap();
        assert_eq!(g.value(e).item(), 0.0);

        let mut v = vec![0.0; 4];
        v[0] = 1.0;
        let s = scorer(&mut g, v, Tensor::identity(4), Tensor::identity(4), 0.0);
        let z = row(&mut g, &[0.0; 4]);
        let e = additive_score(&mut g, z, z, &s).unwrap();
        assert_eq!(g.value(e).item(), 0.0);

        let s = scorer(&mut g, vec![1.0, 1.0], Tensor::identity(2), Tensor::identity(2), 0.5);
        let q = row(&mut g, &[0.1, 0.0]);
        let k = row(&mut g, &[0.0, 0.2]);
        let e = additive_score(&mut g, q, k, &s).unwrap();
        let expected = 0.1f64.tanh() + 0.2f64.tanh() + 0.5;
        assert!((g.value(e).item() - expected).abs() < 1e-15);
        assert!((expected - 0.797043).abs() < 1e-6);
    }

    #[test]
    fn context_only_single_and_identical_keys() {
        let mut g = Graph::new();
        let s = scorer(&mut g, vec![0.5, -1.0], Tensor::identity(2), Tensor::identity(2), 0.1);
        let q = row(&mut g, &[0.3, 0.4]);
        let h1 = g.constant(Tensor::row(vec![0.7, -0.2]));
        let out = context_only(&mut g, q, h1, &s).unwrap();
        assert_eq!(g.value(out.alpha).data(), &[1.0]);
        assert_eq!(g.value(out.context_vector).data(), &[0.7, -0.2]);
        assert!(out.fact_vector.is_none() && out.beta.is_none());

        let hs = g.constant(Tensor::from_rows(&vec![vec![0.7, -0.2]; 3]).unwrap());
        let out = context_only(&mut g, q, hs, &s).unwrap();
        for &a in g.value(out.alpha).data() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn context_only_two_key_hand_case() {
        let mut g = Graph::new();
        let s = scorer(&mut g, vec![1.0, 1.0], Tensor::identity(2), Tensor::identity(2), 0.5);
        let q = row(&mut g, &[0.1, 0.0]);
        let hs = g.constant(Tensor::from_rows(&[vec![0.0, 0.2], vec![0.3, -0.1]]).unwrap());
        let out = context_only(&mut g, q, hs, &s).unwrap();
        let e1 = 0.1f64.tanh() + 0.2f64.tanh() + 0.5;
        let e2 = 0.4f64.tanh() + (-0.1f64).tanh() + 0.5;
        let a1 = e1.exp() / (e1.exp() + e2.exp());
        let a2 = 1.0 - a1;
        let alpha = g.value(out.alpha).data();
        assert!((alpha[0] - a1).abs() < 1e-15 && (alpha[1] - a2).abs() < 1e-15);
        let cv = g.value(out.context_vector).data();
        assert!((cv[0] - a2 * 0.3).abs() < 1e-15);
        assert!((cv[1] - (a1 * 0.2 - a2 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn parallel_examples() {
        let mut g = Graph::new();
        let c = scorer(&mut g, vec![0.5, -1.0], Tensor::identity(2), Tensor::identity(2), 0.1);
        let f0 = scorer(&mut g, vec![0.0, 0.0], Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), 0.0);
        let q = row(&mut g, &[0.3, 0.4]);
        let hc = g.constant(Tensor::from_rows(&[vec![0.7, -0.2], vec![0.1, 0.9]]).unwrap());
        let hf1 = g.constant(Tensor::row(vec![0.5, 0.5]));
        let out = parallel(&mut g, q, hc, hf1, &c, &f0).unwrap();
        assert_eq!(g.value(out.beta.unwrap()).data(), &[1.0]);
        assert_eq!(g.value(out.fact_vector.unwrap()).data(), &[0.5, 0.5]);

        let hf = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap());
        let out = parallel(&mut g, q, hc, hf, &c, &f0).unwrap();
        for &b in g.value(out.beta.unwrap()).data() {
            assert!((b - 1.0 / 3.0).abs() < 1e-15);
        }
        let co = context_only(&mut g, q, hc, &c).unwrap();
        assert_eq!(g.value(out.alpha).data(), g.value(co.alpha).data());
    }

    #[test]
    fn fact_prior_examples() {
        let mut g = Graph::new();
        let zero = scorer(&mut g, vec![0.0, 0.0], Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), 0.0);
        let hc = g.constant(Tensor::from_rows(&[vec![0.7, -0.2], vec![0.1, 0.9]]).unwrap());
        let hf = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let p = fact_prior(&mut g, hc, hf, &zero).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);

        // N = 2, M = 2 by hand.
        let s = scorer(&mut g, vec![1.0, -0.5], Tensor::identity(2), Tensor::identity(2), 0.2);
        let p = fact_prior(&mut g, hc, hf, &s).unwrap();
        let m = |c: [f64; 2], f: [f64; 2]| (c[0] + f[0]).tanh() - 0.5 * (c[1] + f[1]).tanh() + 0.2;
        let (c1, c2) = ([0.7, -0.2], [0.1, 0.9]);
        let m1 = m(c1, [1.0, 0.0]) + m(c2, [1.0, 0.0]);
        let m2 = m(c1, [0.0, 1.0]) + m(c2, [0.0, 1.0]);
        let b1 = m1.exp() / (m1.exp() + m2.exp());
        let v = g.value(p).data();
        assert!((v[0] - b1).abs() < 1e-15 && (v[1] - (1.0 - b1)).abs() < 1e-15);

        // N = 1: softmax of the single row.
        let hc1 = g.constant(Tensor::row(vec![0.7, -0.2]));
        let p = fact_prior(&mut g, hc1, hf, &s).unwrap();
        let (r1, r2) = (m(c1, [1.0, 0.0]), m(c1, [0.0, 1.0]));
        assert!((g.value(p).data()[0] - r1.exp() / (r1.exp() + r2.exp())).abs() < 1e-15);
    }

    #[test]
    fn context_guided_mixes_distributions() {
        let mut g = Graph::new();
        let c = scorer(&mut g, vec![0.5, -1.0], Tensor::identity(2), Tensor::identity(2), 0.1);
        let o = scorer(&mut g, vec![0.0, 0.0], Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), 0.0);
        let q = row(&mut g, &[0.3, 0.4]);
        let hc = g.constant(Tensor::from_rows(&[vec![0.7, -0.2], vec![0.1, 0.9]]).unwrap());
        let hf = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let prior = g.constant(Tensor::row(vec![0.2, 0.8]));
        let out = context_guided(&mut g, q, hc, hf, prior, &c, &o).unwrap();
        // zero `o` scorer gives beta_hat = [0.5, 0.5]
        let beta = g.value(out.beta.unwrap()).data();
        assert!((beta[0] - 0.35).abs() < 1e-15 && (beta[1] - 0.65).abs() < 1e-15);
        assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-15);

        let uniform = g.constant(Tensor::row(vec![0.5, 0.5]));
        let out = context_guided(&mut g, q, hc, hf, uniform, &c, &o).unwrap();
        assert_eq!(g.value(out.beta.unwrap()).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_of_two_distributions_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![0.6, 0.4]));
        let b = g.constant(Tensor::row(vec![0.2, 0.8]));
        let s = g.add(a, b).unwrap();
        let m = g.scale(s, 0.5).unwrap();
        let v = g.value(m).data();
        assert!((v[0] - 0.4).abs() < 1e-15 && (v[1] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn variant_parsing() {
        for v in AttentionVariant::ALL {
            assert_eq!(v.as_str().parse::<AttentionVariant>().unwrap(), v);
        }
        assert!("dot".parse::<AttentionVariant>().is_err());
    }
}
