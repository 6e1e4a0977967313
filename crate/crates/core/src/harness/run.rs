//! Experiment execution over a toy model or a capture set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::capture::CaptureSet;
use crate::harness::config::{ExperimentConfig, ModelSource, Selector};
use crate::harness::report::{write_reports, Comparison, ComparisonRow, Summary};
use crate::harness::task::Task;
use crate::harness::{instance_seed, predict_label};
use crate::metrics::{affinity, diversity_with, CovarianceNorm, MetricRecord};
use crate::model::{load_model, CaptureSpec, Model, ModelConfig};
use crate::probe::{
    mean_head_scores, probe_prompt, prompt_head_scores, select_best_head, ActivationSource, BestHead, HeadScore,
    LabelPooling, LiveRun,
};
use crate::prompt::{assemble, AssembledPrompt, Example};
use crate::retrievers::{dense_score, select, Bm25Index, Bm25Params, EmbeddingTable, SelectMode};
use crate::tensor_io::load_store;

/// Salt separating calibration draws from evaluation draws.
const CALIBRATION_SALT: u64 = 0xC0FF_EE00_5EED_0001;

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<MetricRecord>,
    pub best_head: BestHead,
    /// Present when the head was chosen by search during this run.
    pub head_scores: Option<Vec<HeadScore>>,
    pub summary: Summary,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads weights and config of a toy model.
pub fn load_toy_model(weights: &Path, config: &Path) -> Result<Model> {
    let cfg: ModelConfig = read_json(config)?;
    load_model(&load_store(weights)?, cfg)
}

/// Dense table rows for the pool (`pool:i`) and test split (`test:i`).
struct DenseIndex {
    table: EmbeddingTable,
    pool_rows: Vec<usize>,
    test_rows: Vec<usize>,
}

impl DenseIndex {
    fn load(path: &Path, task: &Task) -> Result<Self> {
        let table = EmbeddingTable::load(path)?;
        let rows = |prefix: &str, n: usize| -> Result<Vec<usize>> {
            (0..n)
                .map(|i| {
                    let id = format!("{prefix}:{i}");
                    table
                        .index_of(&id)
                        .ok_or_else(|| Error::Invalid(format!("embedding table lacks id `{id}`")))
                })
                .collect()
        };
        let pool_rows = rows("pool", task.pool.len())?;
        let test_rows = rows("test", task.test.len())?;
        Ok(Self {
            table,
            pool_rows,
            test_rows,
        })
    }

    fn pool_scores(&self, test_index: usize) -> Result<Vec<(usize, f64)>> {
        let q = self.table.row(self.test_rows[test_index]).to_vec();
        self.pool_rows
            .iter()
            .enumerate()
            .map(|(i, &row)| Ok((i, dense_score(&self.table, &q, row)?)))
            .collect()
    }
}

/// Demonstrations of one prompt; pool indices are `None` for leaked queries.
struct Selection {
    demos: Vec<Example>,
    pool_ids: Vec<Option<usize>>,
}

/// Everything a toy-model run needs, loaded once and shared by workers.
struct ToyExperiment<'a> {
    cfg: &'a ExperimentConfig,
    task: Task,
    model: Model,
    candidates: Vec<u32>,
    bm25: Bm25Index,
    dense_selector: Option<DenseIndex>,
    dense_baseline: Option<DenseIndex>,
}

impl<'a> ToyExperiment<'a> {
    fn load(cfg: &'a ExperimentConfig, base: &Path, weights: &Path, config: &Path) -> Result<Self> {
        let task = Task::load(resolve(base, &cfg.task))?;
        let model = load_toy_model(&resolve(base, weights), &resolve(base, config))?;
        Self::new(cfg, base, task, model)
    }

    fn new(cfg: &'a ExperimentConfig, base: &Path, task: Task, model: Model) -> Result<Self> {
        if task.test.len() < cfg.n_test {
            return Err(Error::TooFewRecords {
                needed: cfg.n_test,
                have: task.test.len(),
            });
        }
        let needed = match cfg.selector {
            Selector::Leak => cfg.k - 1,
            _ => cfg.k,
        };
        if needed > task.pool.len() {
            return Err(Error::KTooLarge {
                k: cfg.k,
                available: task.pool.len(),
            });
        }
        if let Selector::Fixed(ids) = &cfg.selector {
            if let Some(&bad) = ids.iter().find(|&&i| i >= task.pool.len()) {
                return Err(Error::IndexOutOfRange {
                    what: "fixed demonstration",
                    index: bad,
                    limit: task.pool.len(),
                });
            }
        }
        let candidates = task.candidate_tokens(model.config().vocab_size)?;
        let texts: Vec<&str> = task.pool.iter().map(|e| e.input_text.as_str()).collect();
        let bm25 = Bm25Index::build(&texts, Bm25Params::default())?;
        let dense_selector = match &cfg.selector {
            Selector::Dense(p) => Some(DenseIndex::load(&resolve(base, p), &task)?),
            _ => None,
        };
        let dense_baseline = match &cfg.dense_baseline {
            Some(p) => Some(DenseIndex::load(&resolve(base, p), &task)?),
            None => None,
        };
        Ok(Self {
            cfg,
            task,
            model,
            candidates,
            bm25,
            dense_selector,
            dense_baseline,
        })
    }

    fn select(&self, index: usize, selector: &Selector, seed: u64) -> Result<Selection> {
        let k = self.cfg.k;
        let query = &self.task.test[index];
        let uniform: Vec<(usize, f64)> = (0..self.task.pool.len()).map(|i| (i, 0.0)).collect();
        let ids: Vec<usize> = match selector {
            Selector::Random => select(&uniform, k, SelectMode::Random { seed })?,
            Selector::Leak => select(&uniform, k - 1, SelectMode::Random { seed })?,
            Selector::Bm25 => select(&self.bm25.score_all(&query.input_text), k, SelectMode::TopK)?,
            Selector::Dense(_) => {
                let dense = self
                    .dense_selector
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("dense selector without a table".into()))?;
                select(&dense.pool_scores(index)?, k, SelectMode::TopK)?
            }
            Selector::Fixed(ids) => ids.clone(),
        };
        let mut demos: Vec<Example> = ids.iter().map(|&i| self.task.pool[i].clone()).collect();
        let mut pool_ids: Vec<Option<usize>> = ids.into_iter().map(Some).collect();
        if *selector == Selector::Leak {
            demos.push(query.clone());
            pool_ids.push(None);
        }
        Ok(Selection { demos, pool_ids })
    }

    fn prompt(&self, index: usize, selection: &Selection) -> Result<AssembledPrompt> {
        let spec = self
            .task
            .prompt_spec(selection.demos.clone(), self.task.test[index].clone());
        assemble(&spec, &self.task.tokenizer)
    }

    fn calibrate(&self) -> Result<Vec<HeadScore>> {
        let n = self.cfg.calibration_prompts.clamp(1, self.task.test.len());
        let per_prompt = (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = instance_seed(self.cfg.seed ^ CALIBRATION_SALT, i);
                let selection = self.select(i, &Selector::Random, seed)?;
                let prompt = self.prompt(i, &selection)?;
                let run = LiveRun::new(&self.model, &prompt.tokens, &CaptureSpec::attn_rows())?;
                prompt_head_scores(&run, &prompt, self.task.test[i].label_id)
            })
            .collect::<Result<Vec<_>>>()?;
        mean_head_scores(&per_prompt)
    }

    fn baselines(&self, index: usize, selection: &Selection) -> Result<BTreeMap<String, f64>> {
        let query = &self.task.test[index];
        let pool_ids: Vec<usize> = selection.pool_ids.iter().flatten().copied().collect();
        let mut out = BTreeMap::new();
        // Leaked demonstrations are not pool documents and are left out.
        if !pool_ids.is_empty() {
            let mut total = 0.0;
            for &d in &pool_ids {
                total += self.bm25.score(&query.input_text, d)?;
            }
            out.insert("bm25".to_string(), total / pool_ids.len() as f64);
            if let Some(dense) = &self.dense_baseline {
                let scores = dense.pool_scores(index)?;
                let total: f64 = pool_ids.iter().map(|&d| scores[d].1).sum();
                out.insert("dense".to_string(), total / pool_ids.len() as f64);
            }
        }
        Ok(out)
    }

    fn evaluate(&self, index: usize, selector: &Selector, best: BestHead) -> Result<MetricRecord> {
        let seed = instance_seed(self.cfg.seed, index);
        let selection = self.select(index, selector, seed)?;
        let prompt = self.prompt(index, &selection)?;
        let capture = CaptureSpec {
            attn_rows: false,
            hidden_layers: vec![best.layer],
            full_attn: false,
        };
        let run = LiveRun::new(&self.model, &prompt.tokens, &capture)?;
        let query = &self.task.test[index];
        let predicted = predict_label(run.output.last_logits(), &self.candidates)?;
        record_for(
            &run,
            &prompt,
            query.label_id,
            best,
            RecordInputs {
                instance_id: format!("test-{index:06}"),
                correct: predicted == query.label_id,
                baseline_scores: self.baselines(index, &selection)?,
                pooling: self.cfg.label_pooling,
                covariance: self.cfg.covariance,
            },
        )
    }

    fn best_head(&self) -> Result<(BestHead, Option<Vec<HeadScore>>)> {
        match self.cfg.best_head {
            Some(h) => {
                self.model.head_qk(h.layer, h.head)?;
                Ok((h, None))
            }
            None => {
                let scores = self.calibrate()?;
                Ok((select_best_head(&scores)?, Some(scores)))
            }
        }
    }

    fn records(&self, selector: &Selector, best: BestHead) -> Result<Vec<MetricRecord>> {
        let mut records = (0..self.cfg.n_test)
            .into_par_iter()
            .map(|i| self.evaluate(i, selector, best))
            .collect::<Result<Vec<_>>>()?;
        records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        Ok(records)
    }
}

struct RecordInputs {
    instance_id: String,
    correct: bool,
    baseline_scores: BTreeMap<String, f64>,
    pooling: LabelPooling,
    covariance: CovarianceNorm,
}

fn record_for(
    source: &dyn ActivationSource,
    prompt: &AssembledPrompt,
    query_label_id: usize,
    best: BestHead,
    inputs: RecordInputs,
) -> Result<MetricRecord> {
    let outcome = probe_prompt(source, prompt, query_label_id, Some(best))?;
    let labels = outcome.reps.label_vectors(inputs.pooling);
    let record = MetricRecord {
        instance_id: inputs.instance_id,
        k: prompt.k(),
        affinity: affinity(&outcome.reps.query, &labels)?,
        diversity: diversity_with(&labels, inputs.covariance)?,
        correct: inputs.correct,
        baseline_scores: inputs.baseline_scores,
    };
    record.check()?;
    Ok(record)
}

/// Metric records of the first `n` captured prompts.
pub fn capture_records(
    set: &CaptureSet,
    n: usize,
    best: BestHead,
    pooling: LabelPooling,
    covariance: CovarianceNorm,
) -> Result<Vec<MetricRecord>> {
    if set.len() < n {
        return Err(Error::TooFewRecords {
            needed: n,
            have: set.len(),
        });
    }
    let mut records = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = &set.manifest.prompts[i];
            let run = set.run(i)?;
            let logits = run
                .logits
                .as_deref()
                .ok_or_else(|| Error::MissingCapture(format!("label logits of prompt {}", p.instance_id(i))))?;
            let candidates: Vec<u32> = (0..logits.len() as u32).collect();
            let predicted = predict_label(logits, &candidates)?;
            record_for(
                &run,
                &p.assembled(),
                p.query_label_id,
                best,
                RecordInputs {
                    instance_id: p.instance_id(i),
                    correct: predicted == p.query_label_id,
                    baseline_scores: p.baseline_scores.clone(),
                    pooling,
                    covariance,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    records.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
    Ok(records)
}

fn finish(
    cfg: &ExperimentConfig,
    base: &Path,
    records: Vec<MetricRecord>,
    best: BestHead,
    head_scores: Option<Vec<HeadScore>>,
) -> Result<RunOutput> {
    let summary = Summary::compute(&records, cfg, Some(best))?;
    if let Some(dir) = &cfg.output_dir {
        write_reports(resolve(base, dir), &records, &summary)?;
    }
    Ok(RunOutput {
        records,
        best_head: best,
        head_scores,
        summary,
    })
}

/// Runs one experiment; relative paths in `cfg` resolve against the working
/// directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    run_experiment_in(cfg, Path::new("."))
}

/// As [`run_experiment`], resolving relative paths against `base`.
pub fn run_experiment_in(cfg: &ExperimentConfig, base: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    match &cfg.model_source {
        ModelSource::Toy { weights, config } => {
            let exp = ToyExperiment::load(cfg, base, weights, config)?;
            let (best, head_scores) = exp.best_head()?;
            let records = exp.records(&cfg.selector, best)?;
            finish(cfg, base, records, best, head_scores)
        }
        ModelSource::Capture { manifest } => {
            let set = CaptureSet::load(resolve(base, manifest))?;
            let (best, head_scores) = match cfg.best_head.or(set.manifest.best_head) {
                Some(h) => (h, None),
                None => {
                    let scores = set.head_scores()?;
                    (select_best_head(&scores)?, Some(scores))
                }
            };
            let records = capture_records(&set, cfg.n_test, best, cfg.label_pooling, cfg.covariance)?;
            finish(cfg, base, records, best, head_scores)
        }
    }
}

/// Mean head scores and the chosen head, without computing metrics.
pub fn score_heads(cfg: &ExperimentConfig, base: &Path) -> Result<(Vec<HeadScore>, BestHead)> {
    let scores = match &cfg.model_source {
        ModelSource::Toy { weights, config } => ToyExperiment::load(cfg, base, weights, config)?.calibrate()?,
        ModelSource::Capture { manifest } => CaptureSet::load(resolve(base, manifest))?.head_scores()?,
    };
    let best = select_best_head(&scores)?;
    Ok((scores, best))
}

/// Runs every selector on the same task, seed and head. The head is
/// calibrated once unless `cfg.best_head` fixes it.
pub fn compare_selectors(cfg: &ExperimentConfig, selectors: &[Selector], base: &Path) -> Result<Comparison> {
    cfg.validate()?;
    let ModelSource::Toy { weights, config } = &cfg.model_source else {
        return Err(Error::Invalid(
            "selector comparison needs a toy model; captures fix their demonstrations".into(),
        ));
    };
    if selectors.is_empty() {
        return Err(Error::Empty("selector list"));
    }
    let task = Task::load(resolve(base, &cfg.task))?;
    let model = load_toy_model(&resolve(base, weights), &resolve(base, config))?;
    let mut rows = Vec::new();
    let mut best = cfg.best_head;
    for selector in selectors {
        let mut sub = cfg.clone();
        sub.selector = selector.clone();
        sub.best_head = best;
        sub.validate()?;
        let exp = ToyExperiment::new(&sub, base, task.clone(), model.clone())?;
        let (head, _) = exp.best_head()?;
        best = Some(head);
        let records = exp.records(selector, head)?;
        rows.push(ComparisonRow::from_records(&task.manifest.name, selector, &records)?);
    }
    let comparison = Comparison { rows };
    if let Some(dir) = &cfg.output_dir {
        let dir = resolve(base, dir);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        comparison.write_csv(dir.join("compare.csv"))?;
    }
    Ok(comparison)
}
