//! Small generated corpora for capability checks: one that a model should
//! memorize outright, and one where each context has several valid replies.

use rand::seq::IndexedRandom;

use crate::corpus::{ProcessedExample, TokenId, Vocabulary};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub vocab: Vocabulary,
    pub examples: Vec<ProcessedExample>,
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

pub const OVERFIT_EXAMPLES: usize = 10;
/// 45 content words plus the 5 reserved tokens.
pub const OVERFIT_WORDS: usize = 45;

/// Ten unrelated `(context, fact, response)` triples of random words. Each
/// context is unique, so a model can drive the loss toward zero.
pub fn overfit_corpus(seed: u64) -> SyntheticCorpus {
    let vocab = Vocabulary::from_tokens(words("w", OVERFIT_WORDS));
    let ids: Vec<TokenId> = (0..OVERFIT_WORDS).map(|i| vocab.id(&format!("w{i}"))).collect();
    let mut rng = stream(seed, Purpose::Synthetic, 0);
    let mut draw = |n: usize| -> Vec<TokenId> { (0..n).map(|_| *ids.choose(&mut rng).unwrap()).collect() };
    let mut examples: Vec<ProcessedExample> = Vec::new();
    while examples.len() < OVERFIT_EXAMPLES {
        let context = draw(5);
        if examples.iter().any(|e| e.context == context) {
            continue;
        }
        let fact = draw(6);
        let response = draw(3);
        examples.push(ProcessedExample {
            context,
            fact,
            response,
        });
    }
    SyntheticCorpus { vocab, examples }
}

pub const MANY_CONTEXTS: usize = 4;
pub const MANY_REFERENCES: usize = 4;

/// Four contexts, each paired with four references that differ in their
/// first token. Examples are grouped by context.
pub fn one_to_many_corpus(seed: u64) -> SyntheticCorpus {
    let n_words = 30;
    let vocab = Vocabulary::from_tokens(words("m", n_words));
    let ids: Vec<TokenId> = (0..n_words).map(|i| vocab.id(&format!("m{i}"))).collect();
    let mut rng = stream(seed, Purpose::Synthetic, 1);
    let mut examples = Vec::new();
    let mut contexts: Vec<Vec<TokenId>> = Vec::new();
    while contexts.len() < MANY_CONTEXTS {
        let c: Vec<TokenId> = (0..4).map(|_| *ids.choose(&mut rng).unwrap()).collect();
        if !contexts.contains(&c) {
            contexts.push(c);
        }
    }
    for context in contexts {
        let fact: Vec<TokenId> = (0..4).map(|_| *ids.choose(&mut rng).unwrap()).collect();
        let firsts: Vec<TokenId> = ids.choose_multiple(&mut rng, MANY_REFERENCES).copied().collect();
        for first in firsts {
            let mut response = vec![first];
            response.extend((0..2).map(|_| *ids.choose(&mut rng).unwrap()));
            examples.push(ProcessedExample {
                context: context.clone(),
                fact: fact.clone(),
                response,
            });
        }
    }
    SyntheticCorpus { vocab, examples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn overfit_shape() {
        let c = overfit_corpus(1);
        assert_eq!(c.vocab.len(), 50);
        assert_eq!(c.examples.len(), OVERFIT_EXAMPLES);
        let ctx: HashSet<_> = c.examples.iter().map(|e| e.context.clone()).collect();
        assert_eq!(ctx.len(), OVERFIT_EXAMPLES);
        assert_eq!(overfit_corpus(1).examples, c.examples);
        assert_ne!(overfit_corpus(2).examples, c.examples);
    }

    #[test]
    fn one_to_many_shape() {
        let c = one_to_many_corpus(1);
        assert_eq!(c.examples.len(), MANY_CONTEXTS * MANY_REFERENCES);
        for group in c.examples.chunks(MANY_REFERENCES) {
            let firsts: HashSet<_> = group.iter().map(|e| e.response[0]).collect();
            assert_eq!(firsts.len(), MANY_REFERENCES);
            assert!(group.iter().all(|e| e.context == group[0].context && e.fact == group[0].fact));
        }
    }
}
