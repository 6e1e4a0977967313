//! Task manifests and JSONL datasets.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{Example, PromptSpec, Tokenizer, TokenizerKind, DEFAULT_FORERUNNER, DEFAULT_SEPARATOR, DEFAULT_TEMPLATE};

fn default_template() -> String {
    DEFAULT_TEMPLATE.into()
}

fn default_separator() -> String {
    DEFAULT_SEPARATOR.into()
}

fn default_forerunner() -> String {
    DEFAULT_FORERUNNER.into()
}

/// JSON description of a classification task. Dataset paths are relative to
/// the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub name: String,
    /// Label texts indexed by label id.
    pub labels: Vec<String>,
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default = "default_forerunner")]
    pub forerunner: String,
    #[serde(default)]
    pub prefix: String,
    pub tokenizer: TokenizerKind,
    pub pool: PathBuf,
    pub test: PathBuf,
}

/// A loaded task: manifest, demonstration pool, test split and tokenizer.
#[derive(Debug, Clone)]
pub struct Task {
    pub manifest: TaskManifest,
    pub pool: Vec<Example>,
    pub test: Vec<Example>,
    pub tokenizer: Tokenizer,
}

pub fn read_examples(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[Example]) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for ex in examples {
        serde_json::to_writer(&mut file, ex)?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

impl Task {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: TaskManifest = serde_json::from_str(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let pool = read_examples(base.join(&manifest.pool))?;
        let test = read_examples(base.join(&manifest.test))?;
        Self::new(manifest, pool, test)
    }

    pub fn new(manifest: TaskManifest, pool: Vec<Example>, test: Vec<Example>) -> Result<Self> {
        if manifest.labels.is_empty() {
            return Err(Error::Empty("label set"));
        }
        if pool.is_empty() {
            return Err(Error::Empty("demonstration pool"));
        }
        for ex in pool.iter().chain(&test) {
            match manifest.labels.get(ex.label_id) {
                Some(text) if *text == ex.label_text => {}
                Some(text) => {
                    return Err(Error::Invalid(format!(
                        "example `{}` has label_text `{}` but label {} is `{text}`",
                        ex.input_text, ex.label_text, ex.label_id
                    )))
                }
                None => {
                    return Err(Error::IndexOutOfRange {
                        what: "label id",
                        index: ex.label_id,
                        limit: manifest.labels.len(),
                    })
                }
            }
        }
        let tokenizer = match manifest.tokenizer {
            TokenizerKind::ExternalIds => Tokenizer::ExternalIds,
            TokenizerKind::ByteLevelToy => Tokenizer::ByteLevelToy,
            TokenizerKind::WhitespaceToy => {
                let fixed: Vec<String> = [
                    &manifest.template,
                    &manifest.separator,
                    &manifest.forerunner,
                    &manifest.prefix,
                ]
                .iter()
                .map(|t| t.replace("{input}", " ").replace("{label}", " "))
                .collect();
                let texts = pool
                    .iter()
                    .chain(&test)
                    .map(|e| e.input_text.as_str())
                    .chain(manifest.labels.iter().map(String::as_str))
                    .chain(fixed.iter().map(String::as_str));
                Tokenizer::whitespace_from_texts(texts)
            }
        };
        Ok(Self {
            manifest,
            pool,
            test,
            tokenizer,
        })
    }

    pub fn prompt_spec(&self, demonstrations: Vec<Example>, query: Example) -> PromptSpec {
        PromptSpec {
            demonstrations,
            query,
            template: self.manifest.template.clone(),
            separator: self.manifest.separator.clone(),
            forerunner: self.manifest.forerunner.clone(),
            prefix: self.manifest.prefix.clone(),
        }
    }

    /// First token of each label text, indexed by label id.
    pub fn candidate_tokens(&self, vocab_size: usize) -> Result<Vec<u32>> {
        self.manifest
            .labels
            .iter()
            .map(|text| {
                let ids = self.tokenizer.encode(text)?;
                let first = *ids.first().ok_or_else(|| Error::EmptyLabel(text.clone()))?;
                if first as usize >= vocab_size {
                    return Err(Error::Tokenizer(format!(
                        "label `{text}` starts with token {first}, outside the model vocabulary of {vocab_size}"
                    )));
                }
                Ok(first)
            })
            .collect()
    }
}
