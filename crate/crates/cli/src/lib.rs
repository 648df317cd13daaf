//! Command-line driver: config resolution and the pipeline stages.

pub mod args;
pub mod commands;
pub mod config;

use anyhow::Result;

use args::Sub;

/// Run one parsed subcommand.
pub fn run(sub: &Sub) -> Result<()> {
    let cfg = sub.config()?;
    match sub {
        Sub::Preprocess(a) => commands::preprocess(&cfg, &a.input, &a.output),
        Sub::Train(a) => commands::train(&cfg, &a.input, &a.output, a.resume.as_deref()),
        Sub::Generate(a) => commands::generate(&cfg, &a.model, a.vocab.as_deref(), &a.input, &a.output),
        Sub::Evaluate(a) => {
            let table = commands::evaluate(&cfg, &a.input)?;
            match &a.output {
                Some(p) => std::fs::write(p, &table).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?,
                None => print!("{table}"),
            }
            Ok(())
        }
        Sub::Chat(a) => commands::chat_files(&cfg, &a.model, a.vocab.as_deref(), &a.facts),
    }
}

/// `KGRG_LOG` is `quiet`, `info` (default) or `debug`.
pub fn log_level(value: Option<&str>) -> log::LevelFilter {
    match value {
        Some("quiet") => log::LevelFilter::Off,
        Some("debug") => log::LevelFilter::Debug,
        _ => log::LevelFilter::Info,
    }
}
