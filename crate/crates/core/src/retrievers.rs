//! Baseline demonstration scorers: Okapi BM25, dense-embedding cosine, and
//! top-k / random selection.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor_io::{load_store, TensorStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Lowercase, split on non-alphanumerics, drop empties.
pub fn bm25_tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub doc_term_freqs: Vec<HashMap<String, usize>>,
    pub doc_lengths: Vec<usize>,
    pub avg_doc_len: f64,
    pub doc_freq: HashMap<String, usize>,
    pub n_docs: usize,
    pub params: Bm25Params,
}

pub fn bm25_build<S: AsRef<str>>(corpus: &[S]) -> Result<Bm25Index> {
    Bm25Index::build(corpus, Bm25Params::default())
}

impl Bm25Index {
    pub fn build<S: AsRef<str>>(corpus: &[S], params: Bm25Params) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Empty("corpus"));
        }
        let mut doc_term_freqs = Vec::with_capacity(corpus.len());
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            let terms = bm25_tokenize(doc.as_ref());
            doc_lengths.push(terms.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            doc_term_freqs.push(tf);
        }
        let n_docs = corpus.len();
        let avg_doc_len = doc_lengths.iter().sum::<usize>() as f64 / n_docs as f64;
        Ok(Self {
            doc_term_freqs,
            doc_lengths,
            avg_doc_len,
            doc_freq,
            n_docs,
            params,
        })
    }

    /// `ln((N - df + 0.5) / (df + 0.5) + 1)`, never negative.
    pub fn idf(&self, term: &str) -> f64 {
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        let n = self.n_docs as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    pub fn score(&self, query: &str, doc: usize) -> Result<f64> {
        let tf_map = self.doc_term_freqs.get(doc).ok_or(Error::IndexOutOfRange {
            what: "document",
            index: doc,
            limit: self.n_docs,
        })?;
        let Bm25Params { k1, b } = self.params;
        let len_ratio = if self.avg_doc_len > 0.0 {
            self.doc_lengths[doc] as f64 / self.avg_doc_len
        } else {
            1.0
        };
        let mut total = 0.0;
        for term in bm25_tokenize(query) {
            let tf = tf_map.get(&term).copied().unwrap_or(0) as f64;
            if tf == 0.0 {
                continue;
            }
            total += self.idf(&term) * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len_ratio));
        }
        Ok(total)
    }

    pub fn score_all(&self, query: &str) -> Vec<(usize, f64)> {
        (0..self.n_docs)
            .map(|d| (d, self.score(query, d).expect("in range")))
            .collect()
    }
}

pub fn bm25_score(index: &Bm25Index, query: &str, doc: usize) -> Result<f64> {
    index.score(query, doc)
}

/// Externally produced embeddings, one row per document id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub ids: Vec<String>,
    pub dim: usize,
    pub vectors: Vec<f32>,
}

pub const EMBEDDINGS_TENSOR: &str = "embeddings";
pub const IDS_METADATA_KEY: &str = "ids";

impl EmbeddingTable {
    pub fn new(ids: Vec<String>, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if ids.len() * dim != vectors.len() {
            return Err(Error::LengthMismatch {
                left: ids.len() * dim,
                right: vectors.len(),
            });
        }
        Ok(Self { ids, dim, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    /// Reads the `embeddings` tensor `[n, dim]`; ids come from the `ids`
    /// metadata entry (a JSON string list).
    pub fn from_store(store: &TensorStore) -> Result<Self> {
        let t = store.get(EMBEDDINGS_TENSOR)?;
        if t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                name: EMBEDDINGS_TENSOR.into(),
                expected: vec![0, 0],
                found: t.shape,
            });
        }
        let ids_json = store
            .metadata()
            .get(IDS_METADATA_KEY)
            .ok_or_else(|| Error::Invalid("embedding table lacks `ids` metadata".into()))?;
        let ids: Vec<String> = serde_json::from_str(ids_json)?;
        Self::new(ids, t.shape[1], t.data)
    }

    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        s.insert_f32(EMBEDDINGS_TENSOR, &[self.ids.len(), self.dim], &self.vectors)
            .expect("fresh store");
        s.set_metadata(
            IDS_METADATA_KEY,
            serde_json::to_string(&self.ids).expect("strings serialize"),
        );
        s
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&load_store(path)?)
    }
}

pub fn dense_score(table: &EmbeddingTable, query_vec: &[f32], doc: usize) -> Result<f64> {
    if doc >= table.len() {
        return Err(Error::IndexOutOfRange {
            what: "document",
            index: doc,
            limit: table.len(),
        });
    }
    if query_vec.len() != table.dim {
        return Err(Error::DimensionMismatch {
            context: "query embedding",
            expected: table.dim,
            found: query_vec.len(),
        });
    }
    let q: Vec<f64> = query_vec.iter().map(|&v| f64::from(v)).collect();
    let d: Vec<f64> = table.row(doc).iter().map(|&v| f64::from(v)).collect();
    crate::metrics::cosine(&q, &d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    TopK,
    Random { seed: u64 },
}

/// Picks `k` documents. Top-k returns the highest scorers ordered by
/// ascending score (most similar last, next to the query), ties broken by
/// document id; random sampling is uniform without replacement.
pub fn select(scores: &[(usize, f64)], k: usize, mode: SelectMode) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::KTooLarge {
            k,
            available: scores.len(),
        });
    }
    match mode {
        SelectMode::TopK => {
            let mut ranked = scores.to_vec();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            ranked.truncate(k);
            ranked.reverse();
            Ok(ranked.into_iter().map(|(d, _)| d).collect())
        }
        SelectMode::Random { seed } => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            Ok(rand::seq::index::sample(&mut rng, scores.len(), k)
                .into_iter()
                .map(|i| scores[i].0)
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn build_statistics() {
        let idx = bm25_build(&["a b", "a"]).unwrap();
        assert_eq!(idx.doc_freq["a"], 2);
        assert_eq!(idx.doc_freq["b"], 1);
        assert_eq!(idx.avg_doc_len, 1.5);
        assert!(bm25_build::<&str>(&[]).is_err());
    }

    #[test]
    fn empty_doc_accepted() {
        let idx = bm25_build(&["!!! ..."]).unwrap();
        assert_eq!(idx.doc_lengths, vec![0]);
        assert_eq!(idx.score("anything", 0).unwrap(), 0.0);
    }

    #[test]
    fn three_doc_hand_tally() {
        let idx = bm25_build(&["The cat sat", "the dog ran", "Cats and dogs"]).unwrap();
        assert_eq!(idx.doc_lengths, vec![3, 3, 3]);
        assert_eq!(idx.doc_freq["the"], 2);
        assert_eq!(idx.doc_freq["cat"], 1);
        assert_eq!(idx.doc_freq["cats"], 1);
        assert_eq!(idx.doc_freq.len(), 8);
        assert_eq!(idx.doc_term_freqs[0]["the"], 1);
    }

    #[test]
    fn absent_terms_score_zero() {
        let idx = bm25_build(&["the cat sat", "the dog ran"]).unwrap();
        assert_eq!(idx.score("dog", 0).unwrap(), 0.0);
        assert_eq!(idx.score("zebra unicorn", 1).unwrap(), 0.0);
        assert!(idx.score("cat", 2).is_err());
    }

    #[test]
    fn dense_basic() {
        let t = EmbeddingTable::new(vec!["a".into(), "b".into()], 2, vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        assert!((dense_score(&t, &[2.0, 0.0], 0).unwrap() - 1.0).abs() < 1e-12);
        assert!(dense_score(&t, &[2.0, 0.0], 1).unwrap().abs() < 1e-12);
        assert!(dense_score(&t, &[0.0, 0.0], 1).is_err());
        assert!(dense_score(&t, &[1.0], 1).is_err());
        assert!(dense_score(&t, &[1.0, 0.0], 2).is_err());
    }

    #[test]
    fn embedding_table_store_round_trip() {
        let t = EmbeddingTable::new(vec!["x".into(), "y".into()], 3, vec![0.5; 6]).unwrap();
        assert_eq!(EmbeddingTable::from_store(&t.to_store()).unwrap(), t);
        assert!(EmbeddingTable::new(vec!["x".into()], 3, vec![0.0; 2]).is_err());
    }

    #[test]
    fn select_cases() {
        let scores = [(0, 3.0), (1, 1.0), (2, 2.0)];
        assert_eq!(select(&scores, 2, SelectMode::TopK).unwrap(), vec![2, 0]);
        assert_eq!(select(&scores, 3, SelectMode::TopK).unwrap(), vec![1, 2, 0]);
        let r1 = select(&scores, 2, SelectMode::Random { seed: 5 }).unwrap();
        let r2 = select(&scores, 2, SelectMode::Random { seed: 5 }).unwrap();
        assert_eq!(r1, r2);
        assert!(matches!(select(&scores, 4, SelectMode::TopK), Err(Error::KTooLarge { .. })));
    }

    #[test]
    fn random_selection_is_roughly_uniform() {
        let n = 10;
        let k = 3;
        let trials = 20_000;
        let scores: Vec<(usize, f64)> = (0..n).map(|d| (d, 0.0)).collect();
        let mut counts = vec![0usize; n];
        for seed in 0..trials {
            for d in select(&scores, k, SelectMode::Random { seed }).unwrap() {
                counts[d] += 1;
            }
        }
        let expected = (trials as usize * k) as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 9 degrees of freedom; 0.999 quantile is about 27.9.
        assert!(chi2 < 27.9, "chi2 = {chi2}");
    }

    proptest! {
        #[test]
        fn bm25_monotone_in_tf(tf in 1usize..20, len in 1usize..30, k1 in 0.1f64..3.0, b in 0.0f64..1.0) {
            let mut idx = Bm25Index::build(&["cat dog", "bird", "fish"], Bm25Params { k1, b }).unwrap();
            // Vary only the term frequency; lengths and document frequencies stay fixed.
            idx.doc_lengths[0] = len;
            idx.doc_term_freqs[0].insert("cat".into(), tf);
            let lower = idx.score("cat", 0).unwrap();
            idx.doc_term_freqs[0].insert("cat".into(), tf + 1);
            prop_assert!(idx.score("cat", 0).unwrap() >= lower);
        }

        #[test]
        fn dense_symmetric(a in prop::collection::vec(-1.0f32..1.0, 4), b in prop::collection::vec(-1.0f32..1.0, 4)) {
            prop_assume!(a.iter().any(|v| *v != 0.0) && b.iter().any(|v| *v != 0.0));
            let ta = EmbeddingTable::new(vec!["a".into()], 4, a.clone()).unwrap();
            let tb = EmbeddingTable::new(vec!["b".into()], 4, b.clone()).unwrap();
            prop_assert!((dense_score(&ta, &b, 0).unwrap() - dense_score(&tb, &a, 0).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn top_k_sorted_subset(scores in prop::collection::vec(-5.0f64..5.0, 1..20), k in 0usize..20) {
            let scored: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            prop_assume!(k <= scored.len());
            let picked = select(&scored, k, SelectMode::TopK).unwrap();
            prop_assert_eq!(picked.len(), k);
            for w in picked.windows(2) {
                prop_assert!(scores[w[0]] <= scores[w[1]]);
            }
            let min_picked = picked.iter().map(|&d| scores[d]).fold(f64::INFINITY, f64::min);
            let unpicked_max = (0..scores.len())
                .filter(|d| !picked.contains(d))
                .map(|d| scores[d])
                .fold(f64::NEG_INFINITY, f64::max);
            if k > 0 {
                prop_assert!(min_picked >= unpicked_max);
            }
        }
    }
}
