//! Induction-head scoring, best-head selection and subspace representations.
//!
//! A head's score on one prompt is the attention mass the final query token
//! puts on demonstration label tokens whose label matches the query's ground
//! truth. Heads are ranked by the mean score over a calibration set. The
//! representation of token `j` is `W_Qᵀ (W_K h_j)` where `h_j` is the input to
//! the chosen layer's attention after its normalization.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{CaptureSpec, ForwardOutput, HeadWeights, Model};
use crate::prompt::{correct_label_positions, AssembledPrompt};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BestHead {
    pub layer: usize,
    pub head: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RepRole {
    DemoLabel,
    QueryLast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceRep {
    pub vector: Vec<f64>,
    pub position: usize,
    pub role: RepRole,
}

impl AsRef<[f64]> for SubspaceRep {
    fn as_ref(&self) -> &[f64] {
        &self.vector
    }
}

/// How multi-token labels contribute to the metrics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelPooling {
    /// Every label token is its own vector.
    #[default]
    PerToken,
    /// One mean vector per demonstration.
    Mean,
}

pub fn score_head(attn_row: &[f32], correct_positions: &BTreeSet<usize>) -> Result<f64> {
    let mut total = 0.0f64;
    for &p in correct_positions {
        let v = attn_row.get(p).ok_or(Error::IndexOutOfRange {
            what: "attention position",
            index: p,
            limit: attn_row.len(),
        })?;
        total += f64::from(*v);
    }
    Ok(total)
}

/// Scores every head of one prompt from its `[layer][head]` final-position rows.
pub fn score_all_heads(
    attn_rows: &[Vec<Vec<f32>>],
    correct_positions: &BTreeSet<usize>,
) -> Result<Vec<HeadScore>> {
    let mut out = Vec::new();
    for (layer, heads) in attn_rows.iter().enumerate() {
        for (head, row) in heads.iter().enumerate() {
            out.push(HeadScore {
                layer,
                head,
                score: score_head(row, correct_positions)?,
            });
        }
    }
    Ok(out)
}

/// Per-head mean over prompts. Every prompt must list the same heads.
pub fn mean_head_scores(per_prompt: &[Vec<HeadScore>]) -> Result<Vec<HeadScore>> {
    let first = per_prompt.first().ok_or(Error::Empty("head score list"))?;
    let mut sums: Vec<HeadScore> = first.iter().map(|h| HeadScore { score: 0.0, ..*h }).collect();
    for scores in per_prompt {
        if scores.len() != sums.len() {
            return Err(Error::LengthMismatch {
                left: sums.len(),
                right: scores.len(),
            });
        }
        for (acc, s) in sums.iter_mut().zip(scores) {
            if (acc.layer, acc.head) != (s.layer, s.head) {
                return Err(Error::Invalid("head score lists disagree on head order".into()));
            }
            acc.score += s.score;
        }
    }
    let n = per_prompt.len() as f64;
    sums.iter_mut().for_each(|h| h.score /= n);
    Ok(sums)
}

/// Highest score wins; ties go to the lower layer, then the lower head.
pub fn select_best_head(scores: &[HeadScore]) -> Result<BestHead> {
    scores
        .iter()
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.layer.cmp(&b.layer))
                .then(a.head.cmp(&b.head))
        })
        .map(|h| BestHead {
            layer: h.layer,
            head: h.head,
        })
        .ok_or(Error::Empty("head score list"))
}

pub fn extract_rep(
    hidden: &[f32],
    head: &HeadWeights,
    position: usize,
    role: RepRole,
) -> Result<SubspaceRep> {
    let d_model = head.wk.cols;
    if hidden.len() != d_model {
        return Err(Error::DimensionMismatch {
            context: "hidden state vs key projection",
            expected: d_model,
            found: hidden.len(),
        });
    }
    if head.wq.cols != d_model || head.wq.rows != head.wk.rows {
        return Err(Error::DimensionMismatch {
            context: "query projection vs key projection",
            expected: head.wk.rows * d_model,
            found: head.wq.rows * head.wq.cols,
        });
    }
    let key: Vec<f64> = (0..head.wk.rows)
        .map(|r| {
            head.wk
                .row(r)
                .iter()
                .zip(hidden)
                .map(|(&w, &h)| f64::from(w) * f64::from(h))
                .sum()
        })
        .collect();
    let mut vector = vec![0.0f64; d_model];
    for (r, &kr) in key.iter().enumerate() {
        for (v, &w) in vector.iter_mut().zip(head.wq.row(r)) {
            *v += f64::from(w) * kr;
        }
    }
    if vector.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite representation at position {position}")));
    }
    Ok(SubspaceRep {
        vector,
        position,
        role,
    })
}

/// Activations available for one prompt, either from a live model run or a
/// capture file.
pub trait ActivationSource {
    fn seq_len(&self) -> usize;
    /// `[layer][head]` final-position attention rows.
    fn attn_rows(&self) -> Result<&[Vec<Vec<f32>>]>;
    /// `seq × d_model` post-norm hidden states feeding `layer`'s attention.
    fn hidden(&self, layer: usize) -> Result<&Matrix>;
    fn head_weights(&self, head: BestHead) -> Result<HeadWeights>;
}

/// A completed forward pass of a toy model.
pub struct LiveRun<'a> {
    pub model: &'a Model,
    pub output: ForwardOutput,
}

impl<'a> LiveRun<'a> {
    pub fn new(model: &'a Model, tokens: &[u32], capture: &CaptureSpec) -> Result<Self> {
        Ok(Self {
            model,
            output: model.forward(tokens, capture)?,
        })
    }

    /// Captures attention rows and every layer's hidden states.
    pub fn full(model: &'a Model, tokens: &[u32]) -> Result<Self> {
        let capture = CaptureSpec {
            attn_rows: true,
            hidden_layers: (0..model.config().n_layers).collect(),
            full_attn: false,
        };
        Self::new(model, tokens, &capture)
    }
}

impl ActivationSource for LiveRun<'_> {
    fn seq_len(&self) -> usize {
        self.output.logits.rows
    }

    fn attn_rows(&self) -> Result<&[Vec<Vec<f32>>]> {
        if self.output.attn_rows.is_empty() {
            return Err(Error::MissingCapture("attention rows".into()));
        }
        Ok(&self.output.attn_rows)
    }

    fn hidden(&self, layer: usize) -> Result<&Matrix> {
        self.output
            .post_norm_hidden
            .get(&layer)
            .ok_or_else(|| Error::MissingCapture(format!("hidden states for layer {layer}")))
    }

    fn head_weights(&self, head: BestHead) -> Result<HeadWeights> {
        self.model.head_qk(head.layer, head.head)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptReps {
    /// Per demonstration, one representation per label token.
    pub demo_labels: Vec<Vec<SubspaceRep>>,
    pub query: SubspaceRep,
}

impl PromptReps {
    pub fn label_vectors(&self, pooling: LabelPooling) -> Vec<Vec<f64>> {
        match pooling {
            LabelPooling::PerToken => self
                .demo_labels
                .iter()
                .flatten()
                .map(|r| r.vector.clone())
                .collect(),
            LabelPooling::Mean => self
                .demo_labels
                .iter()
                .map(|reps| {
                    let mut mean = vec![0.0; reps[0].vector.len()];
                    for r in reps {
                        mean.iter_mut().zip(&r.vector).for_each(|(m, v)| *m += v);
                    }
                    let n = reps.len() as f64;
                    mean.iter_mut().for_each(|m| *m /= n);
                    mean
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub best_head: BestHead,
    /// Present when the head was chosen from this prompt's own scores.
    pub head_scores: Option<Vec<HeadScore>>,
    pub reps: PromptReps,
}

/// Scores every head on one prompt.
pub fn prompt_head_scores(
    source: &dyn ActivationSource,
    prompt: &AssembledPrompt,
    query_label_id: usize,
) -> Result<Vec<HeadScore>> {
    check_prompt_fits(source, prompt)?;
    let positions = correct_label_positions(prompt, query_label_id);
    score_all_heads(source.attn_rows()?, &positions)
}

fn check_prompt_fits(source: &dyn ActivationSource, prompt: &AssembledPrompt) -> Result<()> {
    if source.seq_len() != prompt.query_last_idx + 1 {
        return Err(Error::CaptureMismatch(format!(
            "activations cover {} positions, prompt has {}",
            source.seq_len(),
            prompt.query_last_idx + 1
        )));
    }
    Ok(())
}

/// Extracts label and query representations at the best head. Without a
/// fixed head, this prompt's own scores pick one.
pub fn probe_prompt(
    source: &dyn ActivationSource,
    prompt: &AssembledPrompt,
    query_label_id: usize,
    best: Option<BestHead>,
) -> Result<ProbeOutcome> {
    check_prompt_fits(source, prompt)?;
    let (best_head, head_scores) = match best {
        Some(b) => (b, None),
        None => {
            let scores = prompt_head_scores(source, prompt, query_label_id)?;
            (select_best_head(&scores)?, Some(scores))
        }
    };
    let hidden = source.hidden(best_head.layer)?;
    let weights = source.head_weights(best_head)?;
    let rep_at = |pos: usize, role| -> Result<SubspaceRep> {
        if pos >= hidden.rows {
            return Err(Error::IndexOutOfRange {
                what: "hidden position",
                index: pos,
                limit: hidden.rows,
            });
        }
        extract_rep(hidden.row(pos), &weights, pos, role)
    };
    let demo_labels = prompt
        .label_spans
        .iter()
        .map(|span| span.clone().map(|p| rep_at(p, RepRole::DemoLabel)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;
    let query = rep_at(prompt.query_last_idx, RepRole::QueryLast)?;
    Ok(ProbeOutcome {
        best_head,
        head_scores,
        reps: PromptReps { demo_labels, query },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hs(layer: usize, head: usize, score: f64) -> HeadScore {
        HeadScore { layer, head, score }
    }

    #[test]
    fn score_head_sums_positions() {
        let row = [0.1, 0.3, 0.2, 0.4];
        let s = score_head(&row, &BTreeSet::from([1, 2])).unwrap();
        assert!((s - 0.5).abs() < 1e-7);
        assert_eq!(score_head(&row, &BTreeSet::new()).unwrap(), 0.0);
        assert!(score_head(&row, &BTreeSet::from([4])).is_err());
    }

    #[test]
    fn uniform_row_gives_fraction() {
        let n = 10;
        let row = vec![1.0 / n as f32; n];
        let s = score_head(&row, &BTreeSet::from([0, 3, 7])).unwrap();
        assert!((s - 0.3).abs() < 1e-6);
    }

    #[test]
    fn best_head_tie_breaks() {
        assert_eq!(select_best_head(&[hs(2, 1, 0.1)]).unwrap(), BestHead { layer: 2, head: 1 });
        let pick = select_best_head(&[hs(5, 0, 0.7), hs(3, 2, 0.7), hs(3, 4, 0.7)]).unwrap();
        assert_eq!(pick, BestHead { layer: 3, head: 2 });
        assert!(select_best_head(&[]).is_err());
    }

    #[test]
    fn mean_scores_average() {
        let m = mean_head_scores(&[vec![hs(0, 0, 0.2), hs(0, 1, 1.0)], vec![hs(0, 0, 0.4), hs(0, 1, 0.0)]])
            .unwrap();
        assert!((m[0].score - 0.3).abs() < 1e-12);
        assert!((m[1].score - 0.5).abs() < 1e-12);
        assert!(mean_head_scores(&[]).is_err());
    }

    fn identity(n: usize) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        (0..n).for_each(|i| m.set(i, i, 1.0));
        m
    }

    #[test]
    fn identity_projections_return_input() {
        let hw = HeadWeights { wq: identity(3), wk: identity(3) };
        let rep = extract_rep(&[1.0, -2.0, 0.5], &hw, 4, RepRole::QueryLast).unwrap();
        assert_eq!(rep.vector, vec![1.0, -2.0, 0.5]);
        let zero = extract_rep(&[0.0; 3], &hw, 0, RepRole::DemoLabel).unwrap();
        assert!(zero.vector.iter().all(|v| *v == 0.0));
        assert!(matches!(
            extract_rep(&[0.0; 4], &hw, 0, RepRole::DemoLabel),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (dh, dm) = (8, 16);
        let mut rand_mat = |r, c| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
        };
        let hw = HeadWeights { wq: rand_mat(dh, dm), wk: rand_mat(dh, dm) };
        let h: Vec<f32> = rand_mat(1, dm).data;
        // Oracle: form M = W_Qᵀ W_K explicitly, then M h.
        let mut m = vec![vec![0.0f64; dm]; dm];
        for i in 0..dm {
            for j in 0..dm {
                for r in 0..dh {
                    m[i][j] += f64::from(hw.wq.get(r, i)) * f64::from(hw.wk.get(r, j));
                }
            }
        }
        let expected: Vec<f64> = (0..dm)
            .map(|i| (0..dm).map(|j| m[i][j] * f64::from(h[j])).sum())
            .collect();
        let rep = extract_rep(&h, &hw, 0, RepRole::DemoLabel).unwrap();
        for (a, b) in rep.vector.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn selection_is_permutation_invariant(
            scores in prop::collection::vec((0usize..4, 0usize..4, 0u8..5), 1..12),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let list: Vec<HeadScore> = scores
                .iter()
                .map(|&(l, h, s)| hs(l, h, f64::from(s) / 4.0))
                .collect();
            let mut shuffled = list.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(select_best_head(&list).unwrap(), select_best_head(&shuffled).unwrap());
        }

        #[test]
        fn extract_rep_is_linear(
            a in -3i8..=3, b in -3i8..=3,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            // Dyadic values keep `a·x + b·y` exact in f32.
            let mut v = |n: usize| -> Vec<f32> { (0..n).map(|_| f32::from(rng.gen_range(-64i8..=64)) / 64.0).collect() };
            let (a, b) = (f32::from(a), f32::from(b));
            let hw = HeadWeights {
                wq: Matrix::from_vec(3, 6, v(18)),
                wk: Matrix::from_vec(3, 6, v(18)),
            };
            let x = v(6);
            let y = v(6);
            let combo: Vec<f32> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let rx = extract_rep(&x, &hw, 0, RepRole::DemoLabel).unwrap().vector;
            let ry = extract_rep(&y, &hw, 0, RepRole::DemoLabel).unwrap().vector;
            let rc = extract_rep(&combo, &hw, 0, RepRole::DemoLabel).unwrap().vector;
            for i in 0..6 {
                let expect = f64::from(a) * rx[i] + f64::from(b) * ry[i];
                prop_assert!((rc[i] - expect).abs() < 1e-6);
            }
        }
    }
}
