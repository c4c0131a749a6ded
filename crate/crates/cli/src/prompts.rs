//! Prompt files.

use std::fs;

use specdec::distributions::TokenId;
use specdec::lm::parse_token_corpus;

use crate::config::{PromptFormat, RunConfig};
use crate::CliResult;

/// Reads one prompt per non-empty line, truncated to `prompt_len`.
pub fn load(cfg: &RunConfig) -> CliResult<Vec<Vec<TokenId>>> {
    let path = cfg.require_file("prompts", &cfg.prompts)?;
    let mut prompts: Vec<Vec<TokenId>> = match cfg.prompt_format {
        PromptFormat::Bytes => fs::read(path)?
            .split(|&b| b == b'\n')
            .map(|line| line.strip_suffix(b"\r").unwrap_or(line))
            .filter(|line| !line.is_empty())
            .map(|line| line.iter().copied().map(TokenId::from).collect())
            .collect(),
        PromptFormat::Tokens => parse_token_corpus(&fs::read_to_string(path)?)?,
    };
    if let Some(n) = cfg.prompt_len {
        prompts.iter_mut().for_each(|p| p.truncate(n));
    }
    if prompts.is_empty() {
        return Err(format!("no prompts in {}", path.display()).into());
    }
    if let Some(p) = prompts.iter().find(|p| p.len() >= cfg.max_len) {
        return Err(format!("a {}-token prompt leaves no room under max_len {}", p.len(), cfg.max_len).into());
    }
    Ok(prompts)
}

/// `cfg.generations` prompts, cycling through the file. Generation `i` is
/// seeded from `(seed, i)` by the engine, so the list fully determines a run.
pub fn expand(cfg: &RunConfig, prompts: &[Vec<TokenId>]) -> Vec<Vec<TokenId>> {
    let m = cfg.generations.unwrap_or(prompts.len());
    (0..m).map(|i| prompts[i % prompts.len()].clone()).collect()
}
