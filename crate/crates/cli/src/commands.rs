//! The five subcommands. Every output is a pure function of the inputs and
//! the resolved config, so re-running a stage reproduces its files byte for
//! byte.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{debug, info};

use kgrg::corpus::{
    build_vocab, default_stopwords, flatten_context, prepare_dataset, read_conversations, read_examples, read_facts,
    tokenize, truncate_fact, Conversation, FactSet, PipelineStats, ProcessedExample, TokenId, Vocabulary, BOS,
};
use kgrg::cvae::sample_prior;
use kgrg::metrics::{format_table, metric_table, pair_up, read_sentences};
use kgrg::retrieval::TfIdfIndex;
use kgrg::rng::{stream, Purpose};
use kgrg::seqmodel::{load_embeddings, Model, StepModel};
use kgrg::training::{Checkpoint, StepStats, Trainer};

use crate::config::Config;

pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_FILE: &str = "train.tsv";
pub const TEST_FILE: &str = "test.tsv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const HYP_FILE: &str = "hyp.txt";

fn open(path: &Path) -> Result<BufReader<fs::File>> {
    let f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Vocabulary::from_text(&text).with_context(|| format!("bad vocabulary {}", path.display()))
}

fn load_examples(path: &Path) -> Result<Vec<ProcessedExample>> {
    read_examples(open(path)?).with_context(|| format!("bad examples file {}", path.display()))
}

/// The last `round(fraction * n)` conversations are held out, leaving at
/// least one for training.
pub fn split_point(n: usize, fraction: f64) -> usize {
    let test = ((fraction * n as f64).round() as usize).min(n.saturating_sub(1));
    n - test
}

fn stats_row(split: &str, s: &PipelineStats) -> String {
    format!(
        "{split}\t{}\t{}\t{}\t{}\n",
        s.candidates, s.dropped_knowledge, s.dropped_length, s.kept
    )
}

pub fn preprocess(cfg: &Config, input: &Path, output: &Path) -> Result<()> {
    let convs = read_conversations(open(&input.join("conversations.tsv"))?).context("conversations.tsv")?;
    let facts = read_facts(open(&input.join("facts.tsv"))?).context("facts.tsv")?;
    let cut = split_point(convs.len(), cfg.test_fraction);
    let (train, test) = convs.split_at(cut);

    let train_ids: std::collections::HashSet<&str> = train.iter().map(|c| c.id.as_str()).collect();
    let train_facts: Vec<&FactSet> = facts
        .iter()
        .filter(|f| train_ids.contains(f.conversation_id.as_str()))
        .collect();
    let streams = train
        .iter()
        .flat_map(|c: &Conversation| c.utterances.iter().map(|u| u.tokens.as_slice()))
        .chain(train_facts.iter().flat_map(|f| f.facts.iter().map(Vec::as_slice)));
    let vocab = build_vocab(streams, cfg.vocab_min_count);

    let stop = default_stopwords();
    let (train_ex, train_stats) = prepare_dataset(train, &facts, &vocab, stop, cfg.limits())?;
    let (test_ex, test_stats) = prepare_dataset(test, &facts, &vocab, stop, cfg.limits())?;
    if train_ex.is_empty() {
        bail!("no training examples survived filtering");
    }
    fs::create_dir_all(output).with_context(|| format!("cannot create {}", output.display()))?;
    write(&output.join(VOCAB_FILE), &vocab.to_text())?;
    write(&output.join(TRAIN_FILE), &kgrg::corpus::write_examples(&train_ex))?;
    write(&output.join(TEST_FILE), &kgrg::corpus::write_examples(&test_ex))?;
    let mut stats = String::from("split\tcandidates\tdropped_knowledge\tdropped_length\tkept\n");
    stats.push_str(&stats_row("train", &train_stats));
    stats.push_str(&stats_row("test", &test_stats));
    write(&output.join("stats.tsv"), &stats)?;
    info!(
        "preprocess: {} conversations, vocabulary {}, kept {} train / {} test examples",
        convs.len(),
        vocab.len(),
        train_ex.len(),
        test_ex.len()
    );
    Ok(())
}

fn step_line(s: &StepStats) -> String {
    format!(
        "step\t{}\tloss\t{:.6}\tnll\t{:.6}\tkl\t{:.6}\tkl_weight\t{:.6}\tgrad_norm\t{:.6}\n",
        s.step + 1,
        s.loss,
        s.nll,
        s.kl,
        s.kl_weight,
        s.grad_norm
    )
}

pub fn train(cfg: &Config, input: &Path, output: &Path, resume: Option<&Path>) -> Result<()> {
    let vocab = read_vocab(&input.join(VOCAB_FILE))?;
    let data = load_examples(&input.join(TRAIN_FILE))?;
    if data.is_empty() {
        bail!("{} has no examples", input.join(TRAIN_FILE).display());
    }
    let test_path = input.join(TEST_FILE);
    let test = if test_path.exists() {
        load_examples(&test_path)?
    } else {
        Vec::new()
    };
    let fingerprint = cfg.fingerprint();
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p).with_context(|| format!("cannot load {}", p.display()))?;
            Trainer::resume(cfg.train_config(), &fingerprint, ckpt)?
        }
        None => {
            let mut model = Model::init(cfg.model_config(vocab.len()), cfg.seed)?;
            if let Some(path) = &cfg.embeddings {
                let mut rng = stream(cfg.seed, Purpose::Init, 1);
                let table = load_embeddings(open(path)?, &vocab, cfg.embed_dim, &mut rng)
                    .with_context(|| format!("bad embeddings file {}", path.display()))?;
                *model.params.get_mut("embedding").expect("embedding table") = table;
            }
            Trainer::new(model, cfg.train_config(), fingerprint.clone())
        }
    };

    fs::create_dir_all(output).with_context(|| format!("cannot create {}", output.display()))?;
    write(&output.join(VOCAB_FILE), &vocab.to_text())?;
    let mut log = String::new();
    for line in cfg.render().lines() {
        let _ = writeln!(log, "config\t{line}");
    }
    let _ = writeln!(log, "fingerprint\t{fingerprint}");
    let _ = writeln!(log, "parameters\t{}", trainer.model.params.numel());
    let _ = writeln!(log, "examples\t{}\t{}", data.len(), test.len());
    if trainer.step > 0 {
        let _ = writeln!(log, "resume\t{}", trainer.step);
    }
    let eval_line = |t: &Trainer, log: &mut String| -> Result<()> {
        if !test.is_empty() {
            let e = t.evaluate(&test)?;
            let _ = writeln!(log, "eval\t{}\tnll\t{:.6}\tkl\t{:.6}", t.step, e.nll, e.kl);
            info!("step {}: test nll {:.4}", t.step, e.nll);
        }
        Ok(())
    };

    while trainer.step < cfg.train_steps {
        let s = trainer.train_on(&data)?;
        let done = trainer.step;
        if done % cfg.log_every == 0 || done == cfg.train_steps {
            log.push_str(&step_line(&s));
            info!("step {done}: loss {:.4} nll {:.4} kl {:.4}", s.loss, s.nll, s.kl);
        } else {
            debug!("step {done}: loss {:.4}", s.loss);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.train_steps {
            let name = format!("checkpoint-{done:06}.ckpt");
            trainer.checkpoint().save(&output.join(&name))?;
            let _ = writeln!(log, "checkpoint\t{done}\t{name}");
            eval_line(&trainer, &mut log)?;
        }
    }
    trainer.checkpoint().save(&output.join(MODEL_FILE))?;
    let _ = writeln!(log, "checkpoint\t{}\t{MODEL_FILE}", trainer.step);
    eval_line(&trainer, &mut log)?;
    write(&output.join("run.log"), &log)?;
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot load {}", path.display()))?;
    Ok(Model::from_parameters(ckpt.model_config, ckpt.params)?)
}

fn vocab_beside(model: &Path, vocab: Option<&Path>) -> PathBuf {
    vocab
        .map(Path::to_path_buf)
        .unwrap_or_else(|| model.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE))
}

/// Examples sharing a context and fact, in order of first appearance.
pub fn group_references(examples: &[ProcessedExample]) -> Vec<(&ProcessedExample, Vec<&[TokenId]>)> {
    let mut index: HashMap<(&[TokenId], &[TokenId]), usize> = HashMap::new();
    let mut groups: Vec<(&ProcessedExample, Vec<&[TokenId]>)> = Vec::new();
    for e in examples {
        let k = (e.context.as_slice(), e.fact.as_slice());
        match index.get(&k) {
            Some(&i) => groups[i].1.push(&e.response),
            None => {
                index.insert(k, groups.len());
                groups.push((e, vec![&e.response]));
            }
        }
    }
    groups
}

/// Latent sample for the `index`-th decode, drawn from the prior stream.
fn prior_z(model: &Model, seed: u64, index: u64) -> Option<Vec<f64>> {
    model
        .config
        .cvae
        .then(|| sample_prior(&mut stream(seed, Purpose::Prior, index), model.config.dims.latent))
}

pub fn generate(cfg: &Config, model_path: &Path, vocab: Option<&Path>, input: &Path, output: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let vocab = read_vocab(&vocab_beside(model_path, vocab))?;
    if vocab.len() != model.config.dims.vocab {
        bail!(
            "vocabulary has {} entries but the model expects {}",
            vocab.len(),
            model.config.dims.vocab
        );
    }
    let examples = load_examples(input)?;
    let groups = group_references(&examples);
    let width = groups.iter().map(|g| g.1.len()).max().unwrap_or(1);
    let beam = cfg.beam_config();
    let mut hyp = String::new();
    let mut refs = vec![String::new(); width];
    for (i, (ex, responses)) in groups.iter().enumerate() {
        let z = prior_z(&model, cfg.seed, i as u64);
        let h = model.generate(&ex.context, &ex.fact, z.as_deref(), &beam)?;
        hyp.push_str(&vocab.decode(&h.tokens).join(" "));
        hyp.push('\n');
        for (k, r) in refs.iter_mut().enumerate() {
            if let Some(resp) = responses.get(k) {
                r.push_str(&vocab.decode(resp).join(" "));
            }
            r.push('\n');
        }
        debug!("decoded {}/{}", i + 1, groups.len());
    }
    fs::create_dir_all(output).with_context(|| format!("cannot create {}", output.display()))?;
    write(&output.join(HYP_FILE), &hyp)?;
    for (k, r) in refs.iter().enumerate() {
        write(&output.join(format!("ref.{k}.txt")), r)?;
    }
    info!("generate: {} hypotheses, up to {width} references each", groups.len());
    Ok(())
}

pub fn evaluate(cfg: &Config, input: &Path) -> Result<String> {
    let hyps = read_sentences(open(&input.join(HYP_FILE))?)?;
    let mut refs = Vec::new();
    loop {
        let name = format!("ref.{}.txt", refs.len());
        let path = input.join(&name);
        if !path.exists() {
            break;
        }
        refs.push((name, read_sentences(open(&path)?)?));
    }
    if refs.is_empty() {
        bail!("{} has no ref.0.txt", input.display());
    }
    let pairs = pair_up(hyps, refs)?;
    Ok(format_table(&metric_table(&pairs, cfg.bleu_smoothing)))
}

/// Mean weight per position over the decoding steps, top `k` first.
fn top_positions(rows: &[Vec<f64>], k: usize) -> Vec<(usize, f64)> {
    let Some(n) = rows.first().map(Vec::len) else {
        return Vec::new();
    };
    let mut mean = vec![0.0; n];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / rows.len() as f64;
        }
    }
    let mut idx: Vec<(usize, f64)> = mean.into_iter().enumerate().collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx
}

fn summarize(label: &str, ids: &[TokenId], vocab: &Vocabulary, rows: &[Vec<f64>]) -> String {
    let parts: Vec<String> = top_positions(rows, 3)
        .into_iter()
        .map(|(i, w)| format!("{}={w:.3}", vocab.token(ids[i])))
        .collect();
    format!("attention {label}: {}\n", parts.join(" "))
}

/// Console loop: every line is a turn appended to the running context; an
/// empty line or `/reset` starts over. The model's replies join the context
/// too.
pub fn chat<R: BufRead, W: Write>(
    cfg: &Config,
    model: &Model,
    vocab: &Vocabulary,
    facts: &[Vec<String>],
    input: R,
    mut out: W,
) -> Result<()> {
    let index = TfIdfIndex::build(facts)?;
    let mut turns: Vec<Vec<String>> = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        let tokens = tokenize(&line);
        if tokens.is_empty() || line.trim() == "/reset" {
            turns.clear();
            writeln!(out, "(context cleared)")?;
            continue;
        }
        turns.push(tokens);
        let query: Vec<&String> = turns.iter().flatten().collect();
        let fact_tokens = &facts[index.top1(&query)];
        let path: Vec<&[String]> = turns.iter().map(Vec::as_slice).collect();
        let context = flatten_context(&path, vocab, cfg.max_context_tokens)?;
        let fact = truncate_fact(fact_tokens, vocab, cfg.max_fact_tokens);
        let z = prior_z(model, cfg.seed, n as u64);
        let h = model.generate(&context, &fact, z.as_deref(), &cfg.beam_config())?;
        let reply = vocab.decode(&h.tokens);

        // Replay the chosen tokens to read the attention along that path only.
        let mut stepper = model.stepper(&context, &fact, z.as_deref())?;
        let mut state = stepper.start()?;
        for &prev in std::iter::once(&BOS).chain(&h.tokens) {
            state = stepper.step(&state, prev)?.1;
        }
        let g = &stepper.g;
        let (mut alpha, mut beta) = (Vec::new(), Vec::new());
        for t in &stepper.traces {
            if let Some(a) = &t.attention {
                alpha.push(g.value(a.alpha).data().to_vec());
                if let Some(b) = a.beta {
                    beta.push(g.value(b).data().to_vec());
                }
            }
        }

        let preview: Vec<&str> = fact_tokens.iter().take(12).map(String::as_str).collect();
        writeln!(out, "fact: {}", preview.join(" "))?;
        writeln!(out, "response: {}", reply.join(" "))?;
        if alpha.is_empty() {
            writeln!(out, "attention: none")?;
        } else {
            out.write_all(summarize("context", &context, vocab, &alpha).as_bytes())?;
            if !beta.is_empty() {
                out.write_all(summarize("fact", &fact, vocab, &beta).as_bytes())?;
            }
        }
        out.flush()?;
        turns.push(reply);
    }
    Ok(())
}

pub fn chat_files(cfg: &Config, model_path: &Path, vocab: Option<&Path>, facts_path: &Path) -> Result<()> {
    let model = load_model(model_path)?;
    let vocab = read_vocab(&vocab_beside(model_path, vocab))?;
    let facts: Vec<Vec<String>> = fs::read_to_string(facts_path)
        .with_context(|| format!("cannot read {}", facts_path.display()))?
        .lines()
        .map(tokenize)
        .filter(|f| !f.is_empty())
        .collect();
    if facts.is_empty() {
        bail!("{} has no facts", facts_path.display());
    }
    let stdin = std::io::stdin();
    chat(cfg, &model, &vocab, &facts, stdin.lock(), std::io::stdout().lock())
}
