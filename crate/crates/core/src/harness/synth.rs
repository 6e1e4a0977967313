//! Synthetic task for the planted induction model.
//!
//! Inputs are the tokens `0..n_inputs`; the label of `x` is `x mod n_labels`.
//! Prompts open with the separator, which also sits between demonstrations:
//!
//! ```text
//! <sep> x1 y1 <sep> x2 y2 <sep> xq
//! ```
//!
//! The planted induction head copies the label that followed an earlier
//! copy of `xq`, so a demonstration sharing the query's input drives a
//! correct prediction.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::harness::config::{ExperimentConfig, ModelSource};
use crate::harness::task::{write_examples, TaskManifest};
use crate::model::planted::PlantedCircuit;
use crate::prompt::{Example, TokenizerKind};
use crate::retrievers::EmbeddingTable;
use crate::tensor_io::save_store;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub circuit: PlantedCircuit,
    pub n_pool: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Uniform noise added to the one-hot dense embeddings.
    pub embedding_noise: f32,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            circuit: PlantedCircuit::default(),
            n_pool: 256,
            n_test: 512,
            seed: 0,
            embedding_noise: 0.3,
        }
    }
}

/// Files written by [`write_planted`], all inside one directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub dir: PathBuf,
    pub task: PathBuf,
    pub weights: PathBuf,
    pub model_config: PathBuf,
    pub embeddings: PathBuf,
    pub experiment: PathBuf,
}

pub fn planted_example(circuit: &PlantedCircuit, x: usize) -> Example {
    let label = x % circuit.n_labels;
    Example {
        input_text: circuit.input_token(x).to_string(),
        label_id: label,
        label_text: circuit.label_token(label).to_string(),
    }
}

pub fn planted_manifest(circuit: &PlantedCircuit) -> TaskManifest {
    let sep = circuit.separator_token();
    TaskManifest {
        name: "planted-mod".into(),
        labels: (0..circuit.n_labels)
            .map(|l| circuit.label_token(l).to_string())
            .collect(),
        template: "{input} {label}".into(),
        separator: format!(" {sep} "),
        forerunner: String::new(),
        prefix: format!("{sep} "),
        tokenizer: TokenizerKind::ExternalIds,
        pool: "pool.jsonl".into(),
        test: "test.jsonl".into(),
    }
}

/// Pool and test splits with inputs drawn uniformly.
pub fn planted_splits(opts: &SynthOptions) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let c = &opts.circuit;
    let mut draw = |n: usize| -> Vec<Example> {
        (0..n)
            .map(|_| planted_example(c, rng.gen_range(0..c.n_inputs)))
            .collect()
    };
    let pool = draw(opts.n_pool);
    let test = draw(opts.n_test);
    (pool, test)
}

/// Noisy one-hot embeddings of every pool and test input, ids `pool:i` and
/// `test:i`.
pub fn planted_embeddings(opts: &SynthOptions, pool: &[Example], test: &[Example]) -> Result<EmbeddingTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xE3B0_C442);
    let dim = opts.circuit.n_inputs;
    let mut ids = Vec::new();
    let mut vectors = Vec::new();
    for (split, examples) in [("pool", pool), ("test", test)] {
        for (i, ex) in examples.iter().enumerate() {
            let x: usize = ex
                .input_text
                .parse()
                .map_err(|_| Error::Invalid(format!("non-numeric planted input `{}`", ex.input_text)))?;
            ids.push(format!("{split}:{i}"));
            vectors.extend((0..dim).map(|d| {
                let hot = if d == x { 1.0 } else { 0.0 };
                hot + rng.gen_range(0.0..opts.embedding_noise.max(f32::MIN_POSITIVE))
            }));
        }
    }
    EmbeddingTable::new(ids, dim, vectors)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes the planted model, its task, a dense embedding table and a ready
/// experiment config (paths relative to `dir`).
pub fn write_planted(dir: impl AsRef<Path>, opts: &SynthOptions) -> Result<SynthPaths> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths {
        dir: dir.to_path_buf(),
        task: dir.join("task.json"),
        weights: dir.join("model.safetensors"),
        model_config: dir.join("model.json"),
        embeddings: dir.join("embeddings.safetensors"),
        experiment: dir.join("experiment.json"),
    };
    save_store(&opts.circuit.store(), &paths.weights)?;
    write_json(&paths.model_config, &opts.circuit.config())?;
    let manifest = planted_manifest(&opts.circuit);
    let (pool, test) = planted_splits(opts);
    write_examples(dir.join(&manifest.pool), &pool)?;
    write_examples(dir.join(&manifest.test), &test)?;
    write_json(&paths.task, &manifest)?;
    save_store(&planted_embeddings(opts, &pool, &test)?.to_store(), &paths.embeddings)?;

    let mut cfg = ExperimentConfig::new(
        "task.json",
        ModelSource::Toy {
            weights: "model.safetensors".into(),
            config: "model.json".into(),
        },
    );
    cfg.n_test = opts.n_test.min(300);
    cfg.seed = opts.seed;
    cfg.output_dir = Some("out".into());
    cfg.dense_baseline = Some("embeddings.safetensors".into());
    write_json(&paths.experiment, &cfg)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::task::Task;
    use crate::prompt::assemble;

    #[test]
    fn planted_prompt_layout() {
        let c = PlantedCircuit::default();
        let manifest = planted_manifest(&c);
        let demos = vec![planted_example(&c, 3), planted_example(&c, 5)];
        let task = Task::new(manifest, demos.clone(), vec![planted_example(&c, 3)]).unwrap();
        let p = assemble(&task.prompt_spec(demos, planted_example(&c, 3)), &task.tokenizer).unwrap();
        let sep = c.separator_token();
        assert_eq!(p.tokens, vec![sep, 3, c.label_token(3), sep, 5, c.label_token(1), sep, 3]);
        assert_eq!(p.label_spans, vec![2..3, 5..6]);
        assert_eq!(task.candidate_tokens(c.vocab_size()).unwrap(), vec![8, 9, 10, 11]);
    }

    #[test]
    fn splits_are_seeded() {
        let opts = SynthOptions {
            n_pool: 20,
            n_test: 10,
            ..SynthOptions::default()
        };
        assert_eq!(planted_splits(&opts), planted_splits(&opts));
        let other = SynthOptions { seed: 1, ..opts.clone() };
        assert_ne!(planted_splits(&opts), planted_splits(&other));
        let (pool, test) = planted_splits(&opts);
        let table = planted_embeddings(&opts, &pool, &test).unwrap();
        assert_eq!(table.len(), 30);
        assert_eq!(table.index_of("test:9"), Some(29));
    }
}
