//! Activation captures exported from real models.
//!
//! A capture is a tensor container plus a JSON manifest. Per prompt, the
//! manifest names up to three tensors:
//!
//! * `attn_rows`: `[n_layers, n_heads, seq]` final-position attention rows
//!   (head-search pass),
//! * `hidden`: `[seq, d_model]` post-norm hidden states at `hidden_layer`
//!   (metrics pass),
//! * `logits`: `[n_candidates]` logits of the label-candidate tokens.
//!
//! `head_weights` names `[d_head, d_model]` query and key projections for the
//! best head (or every head in a head-search export).

use std::collections::BTreeMap;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::HeadWeights;
use crate::probe::{mean_head_scores, prompt_head_scores, select_best_head, ActivationSource, BestHead, HeadScore};
use crate::prompt::AssembledPrompt;
use crate::tensor_io::{load_store, TensorStore};

/// The shape facts a capture must agree with.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    #[serde(default)]
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaptureMode {
    /// Attention rows only, for choosing the best head.
    HeadSearch,
    /// Hidden states and projections for a fixed head.
    Metrics,
    /// Both.
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadWeightNames {
    pub layer: usize,
    pub head: usize,
    pub wq: String,
    pub wk: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureTensorNames {
    #[serde(default)]
    pub attn_rows: Option<String>,
    #[serde(default)]
    pub hidden: Option<String>,
    #[serde(default)]
    pub logits: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturePrompt {
    #[serde(default)]
    pub instance_id: Option<String>,
    pub capture_tensor_names: CaptureTensorNames,
    #[serde(default)]
    pub hidden_layer: Option<usize>,
    /// Half-open `[start, end)` token ranges, one per demonstration.
    pub label_spans: Vec<[usize; 2]>,
    pub demo_label_ids: Vec<usize>,
    pub query_last_idx: usize,
    pub query_label_id: usize,
    pub candidate_token_ids: Vec<u32>,
    #[serde(default)]
    pub token_ids: Option<Vec<u32>>,
    #[serde(default)]
    pub baseline_scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub exporter_affinity: Option<f64>,
    #[serde(default)]
    pub exporter_diversity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptureManifest {
    /// Container file, relative to the manifest.
    pub tensor_file: PathBuf,
    pub model_config: CaptureModelConfig,
    pub mode: CaptureMode,
    #[serde(default)]
    pub best_head: Option<BestHead>,
    #[serde(default)]
    pub head_weights: Vec<HeadWeightNames>,
    pub prompts: Vec<CapturePrompt>,
}

impl CapturePrompt {
    pub fn instance_id(&self, index: usize) -> String {
        self.instance_id
            .clone()
            .unwrap_or_else(|| format!("capture-{index:06}"))
    }

    pub fn assembled(&self) -> AssembledPrompt {
        let seq = self.query_last_idx + 1;
        AssembledPrompt {
            tokens: self.token_ids.clone().unwrap_or_else(|| vec![0; seq]),
            label_spans: self.label_spans.iter().map(|&[s, e]| s..e).collect::<Vec<Range<usize>>>(),
            demo_label_ids: self.demo_label_ids.clone(),
            query_last_idx: self.query_last_idx,
        }
    }
}

/// A loaded, shape-checked capture.
#[derive(Debug, Clone)]
pub struct CaptureSet {
    pub manifest: CaptureManifest,
    pub store: TensorStore,
    weights: BTreeMap<BestHead, HeadWeights>,
}

/// Activations of one captured prompt.
pub struct CaptureRun<'a> {
    seq: usize,
    attn_rows: Option<Vec<Vec<Vec<f32>>>>,
    hidden: Option<(usize, Matrix)>,
    pub logits: Option<Vec<f32>>,
    weights: &'a BTreeMap<BestHead, HeadWeights>,
}

impl ActivationSource for CaptureRun<'_> {
    fn seq_len(&self) -> usize {
        self.seq
    }

    fn attn_rows(&self) -> Result<&[Vec<Vec<f32>>]> {
        self.attn_rows
            .as_deref()
            .ok_or_else(|| Error::MissingCapture("attention rows".into()))
    }

    fn hidden(&self, layer: usize) -> Result<&Matrix> {
        match &self.hidden {
            Some((l, m)) if *l == layer => Ok(m),
            _ => Err(Error::MissingCapture(format!("hidden states for layer {layer}"))),
        }
    }

    fn head_weights(&self, head: BestHead) -> Result<HeadWeights> {
        self.weights
            .get(&head)
            .cloned()
            .ok_or_else(|| Error::MissingCapture(format!("projections of layer {} head {}", head.layer, head.head)))
    }
}

impl CaptureSet {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: CaptureManifest = serde_json::from_str(&text)?;
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let store = load_store(base.join(&manifest.tensor_file))?;
        Self::new(manifest, store)
    }

    pub fn new(manifest: CaptureManifest, store: TensorStore) -> Result<Self> {
        let cfg = &manifest.model_config;
        let mut weights = BTreeMap::new();
        for hw in &manifest.head_weights {
            if hw.layer >= cfg.n_layers || hw.head >= cfg.n_heads {
                return Err(Error::CaptureMismatch(format!(
                    "head weights for layer {} head {} outside a {}×{} model",
                    hw.layer, hw.head, cfg.n_layers, cfg.n_heads
                )));
            }
            let shape = [cfg.d_head, cfg.d_model];
            let wq = store.get_shaped(&hw.wq, &shape)?;
            let wk = store.get_shaped(&hw.wk, &shape)?;
            weights.insert(
                BestHead {
                    layer: hw.layer,
                    head: hw.head,
                },
                HeadWeights {
                    wq: Matrix::from_vec(cfg.d_head, cfg.d_model, wq.data),
                    wk: Matrix::from_vec(cfg.d_head, cfg.d_model, wk.data),
                },
            );
        }
        if manifest.prompts.is_empty() {
            return Err(Error::Empty("capture prompts"));
        }
        let set = Self {
            manifest,
            store,
            weights,
        };
        for i in 0..set.manifest.prompts.len() {
            set.check_prompt(i)?;
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.manifest.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.prompts.is_empty()
    }

    fn check_prompt(&self, i: usize) -> Result<()> {
        let p = &self.manifest.prompts[i];
        let id = p.instance_id(i);
        let fail = |m: String| Err(Error::CaptureMismatch(format!("prompt {id}: {m}")));
        let assembled = p.assembled();
        if let Err(e) = assembled.validate() {
            return fail(e.to_string());
        }
        if p.candidate_token_ids.is_empty() {
            return fail("no label candidates".into());
        }
        if p.query_label_id >= p.candidate_token_ids.len() {
            return fail(format!(
                "query label {} has no candidate among {}",
                p.query_label_id,
                p.candidate_token_ids.len()
            ));
        }
        if let Some(v) = self.manifest.model_config.vocab_size {
            if let Some(&t) = p.candidate_token_ids.iter().find(|&&t| t as usize >= v) {
                return fail(format!("candidate token {t} outside vocabulary of {v}"));
            }
        }
        if let Some(layer) = p.hidden_layer {
            if layer >= self.manifest.model_config.n_layers {
                return fail(format!("hidden layer {layer} out of range"));
            }
        }
        if p.capture_tensor_names.hidden.is_some() && p.hidden_layer.is_none() {
            return fail("hidden states without hidden_layer".into());
        }
        self.run(i).map(|_| ())
    }

    /// Reads one prompt's tensors, checking shapes against the config.
    pub fn run(&self, i: usize) -> Result<CaptureRun<'_>> {
        let p = self.manifest.prompts.get(i).ok_or(Error::IndexOutOfRange {
            what: "capture prompt",
            index: i,
            limit: self.len(),
        })?;
        let cfg = &self.manifest.model_config;
        let seq = p.query_last_idx + 1;
        let names = &p.capture_tensor_names;
        let attn_rows = match &names.attn_rows {
            Some(name) => {
                let t = self.store.get_shaped(name, &[cfg.n_layers, cfg.n_heads, seq])?;
                Some(
                    t.data
                        .chunks(cfg.n_heads * seq)
                        .map(|layer| layer.chunks(seq).map(<[f32]>::to_vec).collect())
                        .collect(),
                )
            }
            None => None,
        };
        let hidden = match (&names.hidden, p.hidden_layer) {
            (Some(name), Some(layer)) => {
                let t = self.store.get_shaped(name, &[seq, cfg.d_model])?;
                Some((layer, Matrix::from_vec(seq, cfg.d_model, t.data)))
            }
            _ => None,
        };
        let logits = match &names.logits {
            Some(name) => Some(self.store.get_shaped(name, &[p.candidate_token_ids.len()])?.data),
            None => None,
        };
        Ok(CaptureRun {
            seq,
            attn_rows,
            hidden,
            logits,
            weights: &self.weights,
        })
    }

    /// Mean head scores over every prompt that carries attention rows.
    pub fn head_scores(&self) -> Result<Vec<HeadScore>> {
        let mut per_prompt = Vec::new();
        for (i, p) in self.manifest.prompts.iter().enumerate() {
            if p.capture_tensor_names.attn_rows.is_none() {
                continue;
            }
            let run = self.run(i)?;
            per_prompt.push(prompt_head_scores(&run, &p.assembled(), p.query_label_id)?);
        }
        if per_prompt.is_empty() {
            return Err(Error::MissingCapture("attention rows on any prompt".into()));
        }
        mean_head_scores(&per_prompt)
    }

    /// The configured head, else the manifest's, else a head search.
    pub fn best_head(&self, configured: Option<BestHead>) -> Result<BestHead> {
        match configured.or(self.manifest.best_head) {
            Some(h) => Ok(h),
            None => select_best_head(&self.head_scores()?),
        }
    }
}
