//! Prompt assembly with label-span tracking.
//!
//! Each demonstration renders as `template` with `{input}` and `{label}`
//! substituted; demonstrations and the query are joined by `separator`. The
//! query renders the template only up to `{label}` (trailing whitespace
//! trimmed) so the final token is the forerunner and the next token is the
//! label. Text pieces are tokenized separately so label spans are exact; the
//! result is checked against tokenizing the full text in one go.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPLATE: &str = "{input} Label: {label}";
pub const DEFAULT_SEPARATOR: &str = " ";
pub const DEFAULT_FORERUNNER: &str = ":";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    #[serde(rename = "text")]
    pub input_text: String,
    #[serde(rename = "label")]
    pub label_id: usize,
    pub label_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub demonstrations: Vec<Example>,
    pub query: Example,
    pub template: String,
    pub separator: String,
    /// Text the rendered query must end with; empty disables the check.
    pub forerunner: String,
    /// Text placed before the first demonstration (e.g. a BOS marker).
    pub prefix: String,
}

impl PromptSpec {
    pub fn new(demonstrations: Vec<Example>, query: Example) -> Self {
        Self {
            demonstrations,
            query,
            template: DEFAULT_TEMPLATE.to_string(),
            separator: DEFAULT_SEPARATOR.to_string(),
            forerunner: DEFAULT_FORERUNNER.to_string(),
            prefix: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub tokens: Vec<u32>,
    pub label_spans: Vec<Range<usize>>,
    pub demo_label_ids: Vec<usize>,
    pub query_last_idx: usize,
}

impl AssembledPrompt {
    pub fn k(&self) -> usize {
        self.label_spans.len()
    }

    /// Checks the structural invariants, e.g. for spans read from a capture manifest.
    pub fn validate(&self) -> Result<()> {
        if self.tokens.is_empty() || self.query_last_idx != self.tokens.len() - 1 {
            return Err(Error::Invalid(format!(
                "query_last_idx {} must be the final index of {} tokens",
                self.query_last_idx,
                self.tokens.len()
            )));
        }
        if self.label_spans.len() != self.demo_label_ids.len() {
            return Err(Error::LengthMismatch {
                left: self.label_spans.len(),
                right: self.demo_label_ids.len(),
            });
        }
        let mut floor = 0;
        for span in &self.label_spans {
            if span.is_empty() || span.start < floor || span.end > self.query_last_idx {
                return Err(Error::Invalid(format!(
                    "label span {span:?} is empty, out of order, or reaches the query"
                )));
            }
            floor = span.end;
        }
        Ok(())
    }
}

/// Union of the label spans whose demonstration label equals the query's.
pub fn correct_label_positions(p: &AssembledPrompt, query_label_id: usize) -> BTreeSet<usize> {
    p.label_spans
        .iter()
        .zip(&p.demo_label_ids)
        .filter(|(_, &id)| id == query_label_id)
        .flat_map(|(span, _)| span.clone())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenizerKind {
    WhitespaceToy,
    ByteLevelToy,
    ExternalIds,
}

/// Toy tokenizers for desk-scale runs.
///
/// * `WhitespaceToy`: alphanumeric runs and single punctuation characters are
///   tokens; whitespace is dropped and decoding joins tokens with one space.
/// * `ByteLevelToy`: one token per UTF-8 byte; decoding is exact.
/// * `ExternalIds`: the text already is whitespace-separated token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tokenizer {
    WhitespaceToy {
        vocab: BTreeMap<String, u32>,
        words: Vec<String>,
    },
    ByteLevelToy,
    ExternalIds,
}

fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            start.get_or_insert(i);
            continue;
        }
        if let Some(s) = start.take() {
            out.push(&text[s..i]);
        }
        if !ch.is_whitespace() {
            out.push(&text[i..i + ch.len_utf8()]);
        }
    }
    if let Some(s) = start {
        out.push(&text[s..]);
    }
    out
}

impl Tokenizer {
    /// Builds a whitespace vocabulary over every word in `texts`, ids in
    /// sorted order.
    pub fn whitespace_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<&str> = texts.into_iter().flat_map(split_words).collect();
        let words: Vec<String> = set.into_iter().map(str::to_string).collect();
        let vocab = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Tokenizer::WhitespaceToy { vocab, words }
    }

    pub fn kind(&self) -> TokenizerKind {
        match self {
            Tokenizer::WhitespaceToy { .. } => TokenizerKind::WhitespaceToy,
            Tokenizer::ByteLevelToy => TokenizerKind::ByteLevelToy,
            Tokenizer::ExternalIds => TokenizerKind::ExternalIds,
        }
    }

    pub fn vocab_size(&self) -> Option<usize> {
        match self {
            Tokenizer::WhitespaceToy { words, .. } => Some(words.len()),
            Tokenizer::ByteLevelToy => Some(256),
            Tokenizer::ExternalIds => None,
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        match self {
            Tokenizer::WhitespaceToy { vocab, .. } => split_words(text)
                .into_iter()
                .map(|w| {
                    vocab
                        .get(w)
                        .copied()
                        .ok_or_else(|| Error::Tokenizer(format!("word `{w}` not in vocabulary")))
                })
                .collect(),
            Tokenizer::ByteLevelToy => Ok(text.bytes().map(u32::from).collect()),
            Tokenizer::ExternalIds => text
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| Error::Tokenizer(format!("`{t}` is not a token id")))
                })
                .collect(),
        }
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        match self {
            Tokenizer::WhitespaceToy { words, .. } => {
                let parts = ids
                    .iter()
                    .map(|&id| {
                        words
                            .get(id as usize)
                            .map(String::as_str)
                            .ok_or_else(|| Error::Tokenizer(format!("id {id} not in vocabulary")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(parts.join(" "))
            }
            Tokenizer::ByteLevelToy => {
                let bytes = ids
                    .iter()
                    .map(|&id| {
                        u8::try_from(id)
                            .map_err(|_| Error::Tokenizer(format!("id {id} is not a byte")))
                    })
                    .collect::<Result<Vec<u8>>>()?;
                String::from_utf8(bytes).map_err(|e| Error::Tokenizer(e.to_string()))
            }
            Tokenizer::ExternalIds => Ok(ids
                .iter()
                .map(u32::to_string)
                .collect::<Vec<_>>()
                .join(" ")),
        }
    }

    /// The canonical form `decode(encode(text))`.
    pub fn normalize(&self, text: &str) -> Result<String> {
        self.decode(&self.encode(text)?)
    }
}

struct TemplateParts<'a> {
    before_label: &'a str,
    after_label: &'a str,
}

fn split_template(template: &str) -> Result<TemplateParts<'_>> {
    for slot in ["{input}", "{label}"] {
        let n = template.matches(slot).count();
        if n != 1 {
            return Err(Error::Template(format!(
                "template must contain `{slot}` exactly once, found {n}"
            )));
        }
    }
    let (before_label, after_label) = template.split_once("{label}").expect("checked");
    if !before_label.contains("{input}") {
        return Err(Error::Template("`{input}` must precede `{label}`".into()));
    }
    Ok(TemplateParts {
        before_label,
        after_label,
    })
}

pub fn assemble(spec: &PromptSpec, tokenizer: &Tokenizer) -> Result<AssembledPrompt> {
    if spec.demonstrations.is_empty() {
        return Err(Error::Empty("demonstrations"));
    }
    let parts = split_template(&spec.template)?;

    let mut pieces: Vec<(String, bool)> = vec![(spec.prefix.clone(), false)];
    for (i, demo) in spec.demonstrations.iter().enumerate() {
        if i > 0 {
            pieces.push((spec.separator.clone(), false));
        }
        pieces.push((parts.before_label.replace("{input}", &demo.input_text), false));
        pieces.push((demo.label_text.clone(), true));
        pieces.push((parts.after_label.replace("{input}", &demo.input_text), false));
    }
    pieces.push((spec.separator.clone(), false));
    let query_text = parts
        .before_label
        .replace("{input}", &spec.query.input_text)
        .trim_end()
        .to_string();
    if !query_text.ends_with(spec.forerunner.trim()) {
        return Err(Error::Template(format!(
            "rendered query does not end with forerunner `{}`",
            spec.forerunner
        )));
    }
    pieces.push((query_text, false));

    let mut tokens = Vec::new();
    let mut label_spans = Vec::new();
    let mut full_text = String::new();
    for (text, is_label) in &pieces {
        let ids = tokenizer.encode(text)?;
        if *is_label {
            if ids.is_empty() {
                return Err(Error::EmptyLabel(text.clone()));
            }
            label_spans.push(tokens.len()..tokens.len() + ids.len());
        }
        tokens.extend(ids);
        full_text.push_str(text);
    }
    if tokens.is_empty() {
        return Err(Error::Empty("prompt"));
    }
    if tokenizer.encode(&full_text)? != tokens {
        return Err(Error::Tokenizer(
            "template pieces do not fall on token boundaries; label spans would be inexact".into(),
        ));
    }
    let prompt = AssembledPrompt {
        query_last_idx: tokens.len() - 1,
        tokens,
        label_spans,
        demo_label_ids: spec.demonstrations.iter().map(|d| d.label_id).collect(),
    };
    prompt.validate()?;
    Ok(prompt)
}
