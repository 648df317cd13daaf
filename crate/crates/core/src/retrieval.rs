//! TF-IDF ranking of a conversation's candidate facts.
//!
//! Term frequency is the raw count, idf is smoothed as
//! `ln((1 + D) / (1 + df)) + 1`, and facts are scored by cosine similarity
//! against the query's tf-idf vector.

use std::collections::BTreeMap;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("cannot build a TF-IDF index over an empty fact set")]
    EmptyFactSet,
}

#[derive(Clone, Debug)]
pub struct TfIdfIndex {
    df: BTreeMap<String, usize>,
    tf: Vec<BTreeMap<String, f64>>,
    norms: Vec<f64>,
}

fn term_counts<S: AsRef<str>>(tokens: &[S]) -> BTreeMap<String, f64> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_ref().to_string()).or_insert(0.0) += 1.0;
    }
    m
}

impl TfIdfIndex {
    pub fn build<S: AsRef<str>>(facts: &[Vec<S>]) -> Result<Self, RetrievalError> {
        if facts.is_empty() {
            return Err(RetrievalError::EmptyFactSet);
        }
        let tf: Vec<_> = facts.iter().map(|f| term_counts(f)).collect();
        let mut df = BTreeMap::new();
        for doc in &tf {
            for term in doc.keys() {
                *df.entry(term.clone()).or_insert(0) += 1;
            }
        }
        let mut index = Self {
            df,
            tf,
            norms: Vec::new(),
        };
        index.norms = index
            .tf
            .iter()
            .map(|doc| {
                doc.iter()
                    .map(|(t, c)| (c * index.idf(t)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        Ok(index)
    }

    pub fn num_facts(&self) -> usize {
        self.tf.len()
    }

    pub fn df(&self, term: &str) -> usize {
        self.df.get(term).copied().unwrap_or(0)
    }

    pub fn idf(&self, term: &str) -> f64 {
        let d = self.num_facts() as f64;
        ((1.0 + d) / (1.0 + self.df(term) as f64)).ln() + 1.0
    }

    /// Weighted vector of fact `i`.
    pub fn fact_vector(&self, i: usize) -> BTreeMap<&str, f64> {
        self.tf[i]
            .iter()
            .map(|(t, c)| (t.as_str(), c * self.idf(t)))
            .collect()
    }

    /// Facts sorted by descending cosine score; ties keep fact order. A query
    /// with no weight scores every fact 0.
    pub fn rank<S: AsRef<str>>(&self, query: &[S]) -> Vec<(usize, f64)> {
        let q = term_counts(query);
        let weights: Vec<(&String, f64)> = q.iter().map(|(t, c)| (t, c * self.idf(t))).collect();
        let qnorm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        let mut scored: Vec<(usize, f64)> = self
            .tf
            .iter()
            .enumerate()
            .map(|(i, doc)| {
                if qnorm == 0.0 || self.norms[i] == 0.0 {
                    return (i, 0.0);
                }
                let dot: f64 = weights
                    .iter()
                    .filter_map(|(t, w)| doc.get(*t).map(|c| w * c * self.idf(t)))
                    .sum();
                (i, (dot / (qnorm * self.norms[i])).clamp(0.0, 1.0))
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored
    }

    pub fn top1<S: AsRef<str>>(&self, query: &[S]) -> usize {
        self.rank(query)[0].0
    }
}
