//! Conversation trees, fact sets and the two-stage filtering pipeline that
//! turns them into `(context, fact, response)` training triples.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::sync::OnceLock;

use crate::retrieval::{RetrievalError, TfIdfIndex};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;

pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>"];

pub const MAX_CONTEXT_TOKENS: usize = 100;
pub const MAX_FACT_TOKENS: usize = 500;
pub const MAX_RESPONSE_TOKENS: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("empty context")]
    EmptyContext,
    #[error("conversation `{0}` has no fact set")]
    MissingFactSet(String),
    #[error("conversation `{conv}`: utterance `{utt}` {reason}")]
    BadTree {
        conv: String,
        utt: String,
        reason: String,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase and split on whitespace runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub id: String,
    pub parent_id: Option<String>,
    pub tokens: Vec<String>,
}

/// One conversation tree; utterances keep their file order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Conversation {
    /// Check that parents resolve inside the conversation and that parent
    /// links contain no cycles.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let index = self.index();
        for u in &self.utterances {
            let bad = |reason: &str| CorpusError::BadTree {
                conv: self.id.clone(),
                utt: u.id.clone(),
                reason: reason.to_string(),
            };
            if u.tokens.is_empty() {
                return Err(bad("has no tokens"));
            }
            let mut cur = u;
            let mut steps = 0;
            while let Some(p) = &cur.parent_id {
                cur = match index.get(p.as_str()) {
                    Some(&i) => &self.utterances[i],
                    None => return Err(bad(&format!("has unknown parent `{p}`"))),
                };
                steps += 1;
                if steps > self.utterances.len() {
                    return Err(bad("is part of a parent cycle"));
                }
            }
        }
        if index.len() != self.utterances.len() {
            return Err(CorpusError::BadTree {
                conv: self.id.clone(),
                utt: String::new(),
                reason: "duplicate utterance ids".into(),
            });
        }
        Ok(())
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.utterances
            .iter()
            .enumerate()
            .map(|(i, u)| (u.id.as_str(), i))
            .collect()
    }

    /// Ancestors of utterance `i`, root first, excluding `i` itself.
    pub fn ancestors(&self, i: usize) -> Vec<&Utterance> {
        let index = self.index();
        let mut chain = Vec::new();
        let mut cur = &self.utterances[i];
        while let Some(p) = &cur.parent_id {
            cur = &self.utterances[index[p.as_str()]];
            chain.push(cur);
        }
        chain.reverse();
        chain
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FactSet {
    pub conversation_id: String,
    pub facts: Vec<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ProcessedExample {
    pub context: Vec<TokenId>,
    pub fact: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, TokenId>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Only the reserved tokens.
    pub fn reserved() -> Self {
        Self::from_tokens(std::iter::empty::<String>())
    }

    /// Reserved tokens followed by `tokens` in order; duplicates and reserved
    /// names are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            token_to_id: HashMap::new(),
            id_to_token: Vec::new(),
        };
        for t in RESERVED_TOKENS {
            v.push(t.to_string());
        }
        for t in tokens {
            let t = t.into();
            if !v.token_to_id.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, t: String) {
        self.token_to_id.insert(t.clone(), self.id_to_token.len());
        self.id_to_token.push(t);
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.id_to_token.get(id).map_or(RESERVED_TOKENS[UNK], String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.id_to_token {
            let _ = writeln!(s, "{t}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, CorpusError> {
        let lines: Vec<&str> = text.lines().collect();
        for (i, r) in RESERVED_TOKENS.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    reason: format!("expected reserved token `{r}`"),
                });
            }
        }
        let v = Self::from_tokens(lines[RESERVED_TOKENS.len()..].iter().copied());
        if v.len() != lines.len() {
            return Err(CorpusError::Parse {
                line: 0,
                reason: "duplicate tokens in vocabulary".into(),
            });
        }
        Ok(v)
    }
}

/// Tokens seen at least `min_count` times, most frequent first, ties in
/// lexicographic order.
pub fn build_vocab<'a, I>(streams: I, min_count: usize) -> Vocabulary
where
    I: IntoIterator<Item = &'a [String]>,
{
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for stream in streams {
        for t in stream {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(t, c)| c >= min_count && !RESERVED_TOKENS.contains(&t))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Join utterances with SEP and keep the last `max_len` ids.
pub fn flatten_context<S: AsRef<str>>(
    path: &[&[S]],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<TokenId>, CorpusError> {
    if path.is_empty() {
        return Err(CorpusError::EmptyContext);
    }
    let mut ids = Vec::new();
    for (i, utt) in path.iter().enumerate() {
        if i > 0 {
            ids.push(SEP);
        }
        ids.extend(vocab.encode(utt));
    }
    let start = ids.len().saturating_sub(max_len);
    Ok(ids.split_off(start))
}

/// First `max_len` ids of a fact.
pub fn truncate_fact<S: AsRef<str>>(fact: &[S], vocab: &Vocabulary, max_len: usize) -> Vec<TokenId> {
    vocab.encode(&fact[..fact.len().min(max_len)])
}

/// The bundled English stopword list.
pub fn default_stopwords() -> &'static HashSet<String> {
    static WORDS: OnceLock<HashSet<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("../data/stopwords_en.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    })
}

fn is_punctuation(token: &str) -> bool {
    !token.chars().any(char::is_alphanumeric)
}

fn content_words<'a>(tokens: &'a [String], stopwords: &HashSet<String>) -> BTreeSet<&'a str> {
    tokens
        .iter()
        .map(String::as_str)
        .filter(|t| !is_punctuation(t) && !stopwords.contains(*t))
        .collect()
}

/// Keep a sample only when response and fact share a content word.
pub fn knowledge_filter(response: &[String], fact: &[String], stopwords: &HashSet<String>) -> bool {
    let r = content_words(response, stopwords);
    let f = content_words(fact, stopwords);
    !r.is_disjoint(&f)
}

pub fn length_filter(response: &[String]) -> bool {
    length_filter_with(response, MAX_RESPONSE_TOKENS)
}

pub fn length_filter_with(response: &[String], max_len: usize) -> bool {
    !response.is_empty() && response.len() <= max_len
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub context: usize,
    pub fact: usize,
    pub response: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            context: MAX_CONTEXT_TOKENS,
            fact: MAX_FACT_TOKENS,
            response: MAX_RESPONSE_TOKENS,
        }
    }
}

/// Counts of candidates removed at each stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PipelineStats {
    pub candidates: usize,
    pub dropped_knowledge: usize,
    pub dropped_length: usize,
    pub kept: usize,
}

/// Expand every conversation tree into examples. Each non-root utterance is
/// a response; its ancestors form the context; the top-ranked fact for that
/// context is attached; the knowledge and length filters decide whether the
/// example is kept.
pub fn prepare_dataset(
    conversations: &[Conversation],
    factsets: &[FactSet],
    vocab: &Vocabulary,
    stopwords: &HashSet<String>,
    limits: Limits,
) -> Result<(Vec<ProcessedExample>, PipelineStats), CorpusError> {
    let by_id: HashMap<&str, &FactSet> = factsets
        .iter()
        .map(|f| (f.conversation_id.as_str(), f))
        .collect();
    let mut out = Vec::new();
    let mut stats = PipelineStats::default();
    for conv in conversations {
        conv.validate()?;
        let facts = by_id
            .get(conv.id.as_str())
            .ok_or_else(|| CorpusError::MissingFactSet(conv.id.clone()))?;
        let index = TfIdfIndex::build(&facts.facts)?;
        for (i, utt) in conv.utterances.iter().enumerate() {
            if utt.parent_id.is_none() {
                continue;
            }
            stats.candidates += 1;
            let chain = conv.ancestors(i);
            let query: Vec<String> = chain.iter().flat_map(|u| u.tokens.iter().cloned()).collect();
            let top = index.top1(&query);
            let fact = &facts.facts[top];
            if !knowledge_filter(&utt.tokens, fact, stopwords) {
                stats.dropped_knowledge += 1;
                continue;
            }
            if !length_filter_with(&utt.tokens, limits.response) {
                stats.dropped_length += 1;
                continue;
            }
            let path: Vec<&[String]> = chain.iter().map(|u| u.tokens.as_slice()).collect();
            out.push(ProcessedExample {
                context: flatten_context(&path, vocab, limits.context)?,
                fact: truncate_fact(fact, vocab, limits.fact),
                response: vocab.encode(&utt.tokens),
            });
            stats.kept += 1;
        }
    }
    Ok((out, stats))
}

fn field<'a>(parts: &[&'a str], i: usize, line: usize, what: &str) -> Result<&'a str, CorpusError> {
    parts.get(i).copied().ok_or_else(|| CorpusError::Parse {
        line,
        reason: format!("missing {what} field"),
    })
}

/// `conv_id \t utt_id \t parent_id|- \t tokens`, grouped by conversation in
/// order of first appearance.
pub fn read_conversations<R: BufRead>(reader: R) -> Result<Vec<Conversation>, CorpusError> {
    let mut convs: Vec<Conversation> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        let lineno = n + 1;
        let conv = field(&parts, 0, lineno, "conversation id")?;
        let utt = field(&parts, 1, lineno, "utterance id")?;
        let parent = field(&parts, 2, lineno, "parent id")?;
        let text = field(&parts, 3, lineno, "token")?;
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(CorpusError::Parse {
                line: lineno,
                reason: "utterance has no tokens".into(),
            });
        }
        let idx = *pos.entry(conv.to_string()).or_insert_with(|| {
            convs.push(Conversation {
                id: conv.to_string(),
                utterances: Vec::new(),
            });
            convs.len() - 1
        });
        convs[idx].utterances.push(Utterance {
            id: utt.to_string(),
            parent_id: (parent != "-").then(|| parent.to_string()),
            tokens,
        });
    }
    for c in &convs {
        c.validate()?;
    }
    Ok(convs)
}

/// `conv_id \t fact tokens`, one fact per line.
pub fn read_facts<R: BufRead>(reader: R) -> Result<Vec<FactSet>, CorpusError> {
    let mut sets: Vec<FactSet> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(2, '\t').collect();
        let conv = field(&parts, 0, n + 1, "conversation id")?;
        let tokens = tokenize(field(&parts, 1, n + 1, "fact")?);
        if tokens.is_empty() {
            return Err(CorpusError::Parse {
                line: n + 1,
                reason: "empty fact".into(),
            });
        }
        let idx = *pos.entry(conv.to_string()).or_insert_with(|| {
            sets.push(FactSet {
                conversation_id: conv.to_string(),
                facts: Vec::new(),
            });
            sets.len() - 1
        });
        sets[idx].facts.push(tokens);
    }
    Ok(sets)
}

fn join_ids(ids: &[TokenId]) -> String {
    let mut s = String::new();
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

pub fn write_examples(examples: &[ProcessedExample]) -> String {
    let mut s = String::new();
    for e in examples {
        let _ = writeln!(
            s,
            "{}\t{}\t{}",
            join_ids(&e.context),
            join_ids(&e.fact),
            join_ids(&e.response)
        );
    }
    s
}

pub fn read_examples<R: BufRead>(reader: R) -> Result<Vec<ProcessedExample>, CorpusError> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(CorpusError::Parse {
                line: n + 1,
                reason: format!("expected 3 tab-separated fields, found {}", parts.len()),
            });
        }
        let parse = |s: &str| -> Result<Vec<TokenId>, CorpusError> {
            s.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| CorpusError::Parse {
                        line: n + 1,
                        reason: format!("bad token id `{t}`"),
                    })
                })
                .collect()
        };
        out.push(ProcessedExample {
            context: parse(parts[0])?,
            fact: parse(parts[1])?,
            response: parse(parts[2])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Hello  World"), vec!["hello", "world"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("a b\tc"), vec!["a", "b", "c"]);
    }

    #[test]
    fn build_vocab_examples() {
        let s = toks("a a b");
        let v = build_vocab([s.as_slice()], 2);
        assert_eq!(v.len(), 6);
        assert_eq!(v.get("a"), Some(5));
        assert_eq!(v.get("b"), None);

        let s = toks("a");
        assert_eq!(build_vocab([s.as_slice()], 1).len(), 6);
        assert_eq!(build_vocab(std::iter::empty(), 1).len(), 5);
    }

    #[test]
    fn vocab_order_is_frequency_then_lexicographic() {
        let s = toks("c b b a a z");
        let v = build_vocab([s.as_slice()], 1);
        assert_eq!(&v.tokens()[5..], &["a", "b", "c", "z"]);
        assert_eq!(v.id("<sep>"), SEP);
        assert_eq!(v.id("never-seen"), UNK);
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn flatten_context_examples() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        let (a, b) = (toks("a"), toks("b"));
        let ids = flatten_context(&[a.as_slice(), b.as_slice()], &v, 100).unwrap();
        assert_eq!(ids, vec![v.id("a"), SEP, v.id("b")]);

        let long: Vec<String> = (0..150).map(|i| format!("w{i}")).collect();
        let v2 = Vocabulary::from_tokens(long.iter().cloned());
        let ids = flatten_context(&[long.as_slice()], &v2, 100).unwrap();
        assert_eq!(ids.len(), 100);
        assert_eq!(ids[0], v2.id("w50"));
        assert_eq!(ids[99], v2.id("w149"));

        let oov = toks("oov");
        let ids = flatten_context(&[a.as_slice(), oov.as_slice()], &v, 100).unwrap();
        assert_eq!(ids, vec![v.id("a"), SEP, UNK]);

        let empty: [&[String]; 0] = [];
        assert!(matches!(flatten_context(&empty, &v, 100), Err(CorpusError::EmptyContext)));
    }

    #[test]
    fn separator_counts_toward_context_budget() {
        let v = Vocabulary::from_tokens(["a", "b"]);
        let a: Vec<String> = vec!["a".into(); 99];
        let b = toks("b");
        let ids = flatten_context(&[a.as_slice(), b.as_slice()], &v, 100).unwrap();
        assert_eq!(ids.len(), 100);
        assert_eq!(&ids[97..], &[v.id("a"), SEP, v.id("b")]);
    }

    #[test]
    fn truncate_fact_examples() {
        let v = Vocabulary::from_tokens(["x"]);
        assert_eq!(truncate_fact(&toks("x x x"), &v, 500).len(), 3);
        let long: Vec<String> = vec!["x".into(); 600];
        assert_eq!(truncate_fact(&long, &v, 500).len(), 500);
        assert_eq!(truncate_fact(&toks("q r"), &v, 500), vec![UNK, UNK]);
    }

    #[test]
    fn knowledge_filter_examples() {
        let stop: HashSet<String> = ["the", "a"].iter().map(|s| s.to_string()).collect();
        assert!(knowledge_filter(&toks("the cat"), &toks("a cat ran"), &stop));
        assert!(!knowledge_filter(&toks("hi"), &toks("bye"), &stop));
        let stop: HashSet<String> = ["the"].iter().map(|s| s.to_string()).collect();
        assert!(!knowledge_filter(&toks("the !"), &toks("the ."), &stop));
        assert!(!knowledge_filter(&toks("..."), &toks("..."), &stop));
    }

    #[test]
    fn length_filter_examples() {
        let n = |k: usize| vec!["w".to_string(); k];
        assert!(length_filter(&n(20)));
        assert!(!length_filter(&n(21)));
        assert!(!length_filter(&n(0)));
    }

    fn tiny_tree() -> (Conversation, FactSet) {
        let u = |id: &str, p: Option<&str>, t: &str| Utterance {
            id: id.into(),
            parent_id: p.map(Into::into),
            tokens: toks(t),
        };
        let conv = Conversation {
            id: "c1".into(),
            utterances: vec![
                u("r", None, "gilliam wanted to direct harry potter"),
                u("x", Some("r"), "gilliam would have been great"),
                u("y", Some("r"), "columbus was hired instead of gilliam"),
                u("z", Some("r"), "lol ok"),
            ],
        };
        let facts = FactSet {
            conversation_id: "c1".into(),
            facts: vec![
                toks("weather is sunny today"),
                toks("gilliam was the first choice to direct harry potter but columbus was hired"),
            ],
        };
        (conv, facts)
    }

    #[test]
    fn prepare_dataset_siblings_share_context() {
        let (conv, facts) = tiny_tree();
        let streams: Vec<&[String]> = conv.utterances.iter().map(|u| u.tokens.as_slice()).collect();
        let vocab = build_vocab(streams, 1);
        let (ex, stats) =
            prepare_dataset(&[conv], &[facts], &vocab, default_stopwords(), Limits::default()).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].context, ex[1].context);
        assert_eq!(ex[0].fact, ex[1].fact);
        assert_eq!(stats.candidates, 3);
        assert_eq!(stats.dropped_knowledge, 1);
    }

    #[test]
    fn prepare_dataset_edge_cases() {
        let (conv, facts) = tiny_tree();
        let vocab = Vocabulary::reserved();
        let root_only = Conversation {
            id: "c1".into(),
            utterances: conv.utterances[..1].to_vec(),
        };
        let (ex, _) =
            prepare_dataset(&[root_only], &[facts], &vocab, default_stopwords(), Limits::default()).unwrap();
        assert!(ex.is_empty());

        let err = prepare_dataset(&[conv], &[], &vocab, default_stopwords(), Limits::default()).unwrap_err();
        assert!(err.to_string().contains("c1"), "{err}");
    }

    #[test]
    fn tree_validation_rejects_cycles_and_dangling_parents() {
        let text = "c\ta\tb\thello\nc\tb\ta\tworld\n";
        assert!(matches!(read_conversations(text.as_bytes()), Err(CorpusError::BadTree { .. })));
        let text = "c\ta\t-\thello\nc\tb\tq\tworld\n";
        let err = read_conversations(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("unknown parent"), "{err}");
    }

    #[test]
    fn file_formats_round_trip() {
        let text = "c1\tr\t-\tHello there\nc1\tx\tr\tGeneral Kenobi\n";
        let convs = read_conversations(text.as_bytes()).unwrap();
        assert_eq!(convs[0].utterances[1].parent_id.as_deref(), Some("r"));
        assert_eq!(convs[0].utterances[1].tokens, toks("general kenobi"));

        let facts = read_facts("c1\tfact one\nc1\tfact two\nc2\tother\n".as_bytes()).unwrap();
        assert_eq!(facts.len(), 2);
        assert_eq!(facts[0].facts.len(), 2);

        let ex = vec![ProcessedExample {
            context: vec![5, 4, 6],
            fact: vec![7],
            response: vec![8, 9],
        }];
        let s = write_examples(&ex);
        assert_eq!(s, "5 4 6\t7\t8 9\n");
        assert_eq!(read_examples(s.as_bytes()).unwrap(), ex);
        assert!(read_examples("1 2\t3\n".as_bytes()).is_err());
    }
}
