//! Prompt pack and lexicon assets.
//!
//! Prompts ship compiled into the binary and can be overridden per file by
//! pointing the configuration at a prompt-pack directory: any of
//! `look.txt`, `nominate.txt`, `judge.txt`, `teacher.txt`, `simulate.txt`
//! found there replaces the default verbatim; missing files keep the
//! shipped text.
//!
//! Lexicons are plain-text term lists ("term" or "term -> canonical", `#`
//! comments allowed) used to pull organ and host context out of free text.

use std::path::Path;

use crate::{Error, Result};

const DEFAULT_LOOK: &str = include_str!("../assets/prompts/look.txt");
const DEFAULT_NOMINATE: &str = include_str!("../assets/prompts/nominate.txt");
const DEFAULT_JUDGE: &str = include_str!("../assets/prompts/judge.txt");
const DEFAULT_TEACHER: &str = include_str!("../assets/prompts/teacher.txt");
const DEFAULT_SIMULATE: &str = include_str!("../assets/prompts/simulate.txt");

const DEFAULT_ORGANS: &str = include_str!("../assets/lexicons/organs.txt");
const DEFAULT_HOSTS: &str = include_str!("../assets/lexicons/hosts.txt");

/// The five stage prompts, as loaded text.
#[derive(Debug, Clone)]
pub struct PromptPack {
    /// Objective-description instructions for the look stage.
    pub look: String,
    /// Hypothesis-generator instructions for candidate nomination.
    pub nominate: String,
    /// Diagnostic-expert preamble for the answer stage.
    pub judge: String,
    /// Instruction-writing prompt for the curriculum teacher.
    pub teacher: String,
    /// Text-to-text description simulation prompt for the curriculum teacher.
    pub simulate: String,
}

impl Default for PromptPack {
    fn default() -> Self {
        PromptPack {
            look: DEFAULT_LOOK.to_string(),
            nominate: DEFAULT_NOMINATE.to_string(),
            judge: DEFAULT_JUDGE.to_string(),
            teacher: DEFAULT_TEACHER.to_string(),
            simulate: DEFAULT_SIMULATE.to_string(),
        }
    }
}

impl PromptPack {
    /// Load overrides from a directory; files not present keep defaults.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::file(dir, "prompt-pack directory does not exist"));
        }
        let mut pack = PromptPack::default();
        for (name, slot) in [
            ("look.txt", &mut pack.look),
            ("nominate.txt", &mut pack.nominate),
            ("judge.txt", &mut pack.judge),
            ("teacher.txt", &mut pack.teacher),
            ("simulate.txt", &mut pack.simulate),
        ] {
            let path = dir.join(name);
            if path.is_file() {
                *slot = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
            }
        }
        Ok(pack)
    }
}

/// An ordered term list with optional canonical forms.
#[derive(Debug, Clone)]
pub struct Lexicon {
    /// (lowercased term, canonical form), in file order.
    entries: Vec<(String, String)>,
}

impl Lexicon {
    /// Parse lexicon text: one term per line, `term -> canonical` to map a
    /// surface form to the word used in rendered queries.
    pub fn parse(text: &str) -> Self {
        let mut entries = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (term, canonical) = match line.split_once("->") {
                Some((term, canonical)) => (term.trim(), canonical.trim()),
                None => (line, line),
            };
            if !term.is_empty() && !canonical.is_empty() {
                entries.push((term.to_lowercase(), canonical.to_string()));
            }
        }
        Lexicon { entries }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(Lexicon::parse(&text))
    }

    pub fn default_organs() -> Self {
        Lexicon::parse(DEFAULT_ORGANS)
    }

    pub fn default_hosts() -> Self {
        Lexicon::parse(DEFAULT_HOSTS)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Canonical form of the earliest term occurrence in `text`
    /// (case-insensitive, word boundaries); the longest term wins a
    /// position tie. Returns `None` when nothing matches.
    pub fn first_match(&self, text: &str) -> Option<&str> {
        let haystack = text.to_lowercase();
        let mut best: Option<(usize, usize, &str)> = None;
        for (term, canonical) in &self.entries {
            if let Some(pos) = find_word(&haystack, term) {
                let better = match best {
                    None => true,
                    Some((best_pos, best_len, _)) => {
                        pos < best_pos || (pos == best_pos && term.len() > best_len)
                    }
                };
                if better {
                    best = Some((pos, term.len(), canonical.as_str()));
                }
            }
        }
        best.map(|(_, _, canonical)| canonical)
    }
}

/// Byte offset of the first occurrence of `term` in `haystack` that sits on
/// word boundaries (neighbors absent or non-alphanumeric).
fn find_word(haystack: &str, term: &str) -> Option<usize> {
    let mut search_from = 0;
    while let Some(rel) = haystack[search_from..].find(term) {
        let start = search_from + rel;
        let end = start + term.len();
        let left_ok = haystack[..start]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let right_ok = haystack[end..]
            .chars()
            .next()
            .is_none_or(|c| !c.is_alphanumeric());
        if left_ok && right_ok {
            return Some(start);
        }
        search_from = start + term.chars().next().map_or(1, char::len_utf8);
    }
    None
}
