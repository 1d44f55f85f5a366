//! Interactive chat over a rolling context window.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use dynprompt_core::adapters::{Adapter, LoadedAdapter};
use dynprompt_core::corpus::Vocabulary;
use dynprompt_core::evalgen::{generate, GenerationConfig};
use dynprompt_core::model::Backbone;
use dynprompt_core::Error;

use crate::workflow::load_backbone;
use crate::{CliError, CliResult, RunConfig};

pub const HELP: &str = "commands: /reset clears the conversation, /quit exits, /help shows this text";

pub struct ChatSession {
    adapter: Adapter,
    backbone: Backbone,
    vocab: Vocabulary,
    gen: GenerationConfig,
    window: usize,
    max_words: usize,
    history: VecDeque<Vec<String>>,
}

impl ChatSession {
    pub fn new(
        loaded: LoadedAdapter,
        vocab: Vocabulary,
        gen: GenerationConfig,
        window: usize,
        max_words: usize,
    ) -> Self {
        Self {
            adapter: loaded.adapter,
            backbone: loaded.backbone,
            vocab,
            gen,
            window: window.max(1),
            max_words,
            history: VecDeque::new(),
        }
    }

    /// Loads `run.backbone` and the single checkpoint named by `run.adapter`.
    pub fn open(cfg: &RunConfig) -> CliResult<Self> {
        let (base, vocab) = load_backbone(&cfg.path("run.backbone", "--backbone")?)?;
        let path = cfg.path("run.adapter", "--adapter")?;
        if !path.is_file() {
            return Err(CliError::Usage(format!(
                "--adapter {}: expected an adapter checkpoint file",
                path.display()
            )));
        }
        let loaded = Adapter::load(&path, &base)?;
        let window = cfg.window()?;
        Ok(Self::new(
            loaded,
            vocab,
            GenerationConfig {
                max_new_tokens: cfg.parse("eval.max_new_tokens")?,
            },
            window.max_context_utterances,
            window.max_utterance_words,
        ))
    }

    /// The utterances the next reply will be conditioned on, oldest first.
    pub fn history(&self) -> Vec<String> {
        self.history.iter().map(|u| u.join(" ")).collect()
    }

    pub fn reset(&mut self) {
        self.history.clear();
    }

    fn push(&mut self, utterance: Vec<String>) {
        self.history.push_back(utterance);
        while self.history.len() > self.window {
            self.history.pop_front();
        }
    }

    /// Adds a user turn and returns the generated reply, which also joins
    /// the history unless it is empty.
    pub fn respond(&mut self, text: &str) -> CliResult<String> {
        let words: Vec<String> = text
            .split_whitespace()
            .take(self.max_words)
            .map(str::to_string)
            .collect();
        if words.is_empty() {
            return Err(Error::Config("empty utterance".into()).into());
        }
        self.push(words);
        let context: Vec<Vec<usize>> = self
            .history
            .iter()
            .map(|u| self.vocab.encode_words(u))
            .collect();
        let ids = generate(&self.adapter, &self.backbone, &context, &self.gen)?;
        let reply: Vec<String> = self
            .vocab
            .decode_words(&ids)?
            .into_iter()
            .take(self.max_words)
            .collect();
        let text = reply.join(" ");
        if !reply.is_empty() {
            self.push(reply);
        }
        Ok(text)
    }
}

/// Reads user turns from `input` until EOF or `/quit`.
pub fn run_repl<R: BufRead, W: Write>(
    session: &mut ChatSession,
    input: R,
    mut output: W,
) -> CliResult<()> {
    let io = |e: std::io::Error| {
        CliError::Core(Error::Io {
            path: "<terminal>".into(),
            source: e,
        })
    };
    writeln!(output, "{HELP}").map_err(io)?;
    for line in input.lines() {
        let line = line.map_err(io)?;
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                session.reset();
                writeln!(output, "(conversation cleared)").map_err(io)?;
            }
            cmd if cmd.starts_with('/') => writeln!(output, "{HELP}").map_err(io)?,
            text => {
                let reply = session.respond(text)?;
                if reply.is_empty() {
                    writeln!(output, "bot: (no reply)").map_err(io)?;
                } else {
                    writeln!(output, "bot: {reply}").map_err(io)?;
                }
            }
        }
        output.flush().map_err(io)?;
    }
    Ok(())
}
