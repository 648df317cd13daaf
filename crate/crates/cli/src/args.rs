//! Command-line surface. Flags that mirror config keys are applied after
//! the config file, so they win.

use std::path::PathBuf;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::{keys_for, Command, Config, ConfigError, Origin};

#[derive(Debug, Parser)]
#[command(name = "kgrg", version, about = "Knowledge-grounded response generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Filter conversation trees into (context, fact, response) examples.
    Preprocess(PreprocessArgs),
    /// Train a model on preprocessed examples.
    Train(TrainArgs),
    /// Beam-search decode an examples file.
    Generate(GenerateArgs),
    /// Score hypotheses against references.
    Evaluate(EvaluateArgs),
    /// Talk to a trained model on the console.
    Chat(ChatArgs),
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory holding conversations.tsv and facts.tsv.
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Output directory for vocab.txt, train.tsv, test.tsv and stats.tsv.
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// baseline | context-only | parallel | context-guided
    #[arg(long)]
    pub attention: Option<String>,
    /// Turn on the latent-variable decoder.
    #[arg(long)]
    pub cvae: bool,
    /// Preprocessed data directory (vocab.txt, train.tsv, optional test.tsv).
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Run directory for run.log, checkpoints and model.ckpt.
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "beam-size")]
    pub beam_size: Option<usize>,
    /// Trained checkpoint.
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    /// Vocabulary file; defaults to vocab.txt beside the checkpoint.
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Examples file to decode.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Output directory for hyp.txt and ref.<k>.txt.
    #[arg(long = "out", value_name = "DIR")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory holding hyp.txt and ref.0.txt, ref.1.txt, ...
    #[arg(long = "in", value_name = "DIR")]
    pub input: PathBuf,
    /// Metric table destination; stdout when absent.
    #[arg(long = "out", value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ChatArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "beam-size")]
    pub beam_size: Option<usize>,
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    #[arg(long, value_name = "PATH")]
    pub vocab: Option<PathBuf>,
    /// Candidate facts, one passage per line.
    #[arg(long, value_name = "FILE")]
    pub facts: PathBuf,
}

fn key_help(cmd: Command) -> String {
    let mut s = String::from("Config keys:\n");
    for k in keys_for(cmd) {
        s.push_str(&format!("  {:<20} {}\n", k.name, k.doc));
    }
    s
}

/// The clap command with each subcommand's config keys in its help.
pub fn command() -> clap::Command {
    let mut c = Cli::command();
    for (name, cmd) in [
        ("preprocess", Command::Preprocess),
        ("train", Command::Train),
        ("generate", Command::Generate),
        ("evaluate", Command::Evaluate),
        ("chat", Command::Chat),
    ] {
        c = c.mut_subcommand(name, |s| s.after_help(key_help(cmd)));
    }
    c
}

pub fn parse_from<I, T>(args: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let m = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&m)
}

/// Defaults, then the config file, then `--set` pairs, then dedicated flags.
pub fn resolve(cfg: &ConfigArgs, flags: &[(&str, Option<String>)]) -> Result<Config, ConfigError> {
    let mut c = match &cfg.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cfg.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Value {
            key: kv.clone(),
            origin: Origin::Flag,
            reason: "expected KEY=VALUE".into(),
        })?;
        c.set(k.trim(), v, Origin::Flag)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            c.set(k, v, Origin::Flag)?;
        }
    }
    Ok(c)
}

impl Sub {
    pub fn config(&self) -> Result<Config, ConfigError> {
        match self {
            Sub::Preprocess(a) => resolve(&a.cfg, &[]),
            Sub::Train(a) => resolve(
                &a.cfg,
                &[
                    ("seed", a.seed.map(|s| s.to_string())),
                    ("attention", a.attention.clone()),
                    ("cvae", a.cvae.then(|| "true".to_string())),
                ],
            ),
            Sub::Generate(a) => resolve(
                &a.cfg,
                &[
                    ("seed", a.seed.map(|s| s.to_string())),
                    ("beam_width", a.beam_size.map(|s| s.to_string())),
                ],
            ),
            Sub::Evaluate(a) => resolve(&a.cfg, &[]),
            Sub::Chat(a) => resolve(
                &a.cfg,
                &[
                    ("seed", a.seed.map(|s| s.to_string())),
                    ("beam_width", a.beam_size.map(|s| s.to_string())),
                ],
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn beam_flag_beats_file() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, "beam_width = 8").unwrap();
        let path = f.path().to_str().unwrap();
        let cli = parse_from([
            "kgrg", "generate", "--config", path, "--beam-size", "1", "--model", "m", "--in", "x", "--out", "o",
        ])
        .unwrap();
        assert_eq!(cli.command.config().unwrap().beam_width, 1);
        let cli = parse_from(["kgrg", "generate", "--config", path, "--model", "m", "--in", "x", "--out", "o"]).unwrap();
        assert_eq!(cli.command.config().unwrap().beam_width, 8);
    }

    #[test]
    fn set_pairs_and_flags() {
        let cli = parse_from([
            "kgrg", "train", "--in", "d", "--out", "r", "--set", "train_steps=7", "--attention", "parallel", "--cvae",
        ])
        .unwrap();
        let c = cli.command.config().unwrap();
        assert_eq!(c.train_steps, 7);
        assert!(c.cvae);
        assert_eq!(c.attention.to_string(), "parallel");
        let cli = parse_from(["kgrg", "train", "--in", "d", "--out", "r", "--attention", "sideways"]).unwrap();
        assert!(cli.command.config().is_err());
    }

    #[test]
    fn missing_path_is_a_usage_error() {
        assert!(parse_from(["kgrg", "train", "--in", "d"]).is_err());
    }

    #[test]
    fn help_lists_consumed_keys() {
        for (name, cmd) in [
            ("preprocess", Command::Preprocess),
            ("train", Command::Train),
            ("generate", Command::Generate),
            ("evaluate", Command::Evaluate),
            ("chat", Command::Chat),
        ] {
            let mut c = command();
            let help = c.find_subcommand_mut(name).unwrap().render_help().to_string();
            for k in keys_for(cmd) {
                assert!(help.contains(k.name), "{name} help lacks {}", k.name);
            }
        }
    }
}
