//! Hand-wired two-layer induction circuit.
//!
//! The residual stream is split into four one-hot blocks of width `vocab`
//! (or `max_seq` for positions):
//!
//! ```text
//! [ token | position | previous token | output ]
//! ```
//!
//! * Layer 0, head 0 is a previous-token head: position `i` attends to `i - 1`
//!   and copies that token into the previous-token block.
//! * Layer 1, head 0 is the induction head: the query reads the current token,
//!   the key reads the previous-token block (plus a weaker copy of the key's
//!   own token), so `[A][B] … [A]` attends from the last `[A]` to `[B]` and
//!   writes `[B]` into the output block, which the LM head reads.
//! * Head 1 of each layer is inert (zero projections, uniform attention).
//!
//! Vocabulary: inputs `0..n_inputs`, labels `n_inputs..n_inputs + n_labels`,
//! then a single separator token. Position 0 can only attend to itself, so
//! prompts should open with the separator to keep its previous-token block
//! from matching a real input.

use crate::error::Result;
use crate::model::{load_model, ActKind, Model, ModelConfig, NormKind, PosKind};
use crate::probe::BestHead;
use crate::tensor_io::TensorStore;

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedCircuit {
    pub n_inputs: usize,
    pub n_labels: usize,
    pub max_seq: usize,
    /// Logit gap of the previous-token head.
    pub prev_sharpness: f32,
    /// Logit gap of the induction head.
    pub induction_sharpness: f32,
    /// Relative weight of the key's own token in the induction key.
    pub key_self_weight: f32,
}

impl Default for PlantedCircuit {
    fn default() -> Self {
        Self {
            n_inputs: 8,
            n_labels: 4,
            max_seq: 64,
            prev_sharpness: 12.0,
            induction_sharpness: 16.0,
            key_self_weight: 0.25,
        }
    }
}

impl PlantedCircuit {
    pub fn vocab_size(&self) -> usize {
        self.n_inputs + self.n_labels + 1
    }

    pub fn input_token(&self, i: usize) -> u32 {
        assert!(i < self.n_inputs);
        i as u32
    }

    pub fn label_token(&self, l: usize) -> u32 {
        assert!(l < self.n_labels);
        (self.n_inputs + l) as u32
    }

    pub fn separator_token(&self) -> u32 {
        (self.n_inputs + self.n_labels) as u32
    }

    pub fn induction_head(&self) -> BestHead {
        BestHead { layer: 1, head: 0 }
    }

    pub fn previous_token_head(&self) -> BestHead {
        BestHead { layer: 0, head: 0 }
    }

    fn d_head(&self) -> usize {
        self.vocab_size().max(self.max_seq)
    }

    pub fn config(&self) -> ModelConfig {
        let v = self.vocab_size();
        ModelConfig {
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 2,
            d_model: 3 * v + self.max_seq,
            d_head: self.d_head(),
            d_ff: 1,
            vocab_size: v,
            norm_kind: NormKind::RmsNorm,
            pos_kind: PosKind::Learned,
            act_kind: ActKind::Gelu,
            max_seq: self.max_seq,
            norm_eps: 1e-9,
            rope_base: 10_000.0,
        }
    }

    pub fn store(&self) -> TensorStore {
        let cfg = self.config();
        let v = self.vocab_size();
        let p = self.max_seq;
        let d = cfg.d_model;
        let dh = cfg.d_head;
        let width = cfg.attn_width();
        let tok = 0;
        let pos = v;
        let prev = v + p;
        let outb = 2 * v + p;
        let score_scale = (dh as f32).sqrt();

        let mut tok_emb = vec![0.0f32; v * d];
        for t in 0..v {
            tok_emb[t * d + tok + t] = 1.0;
        }
        let mut pos_emb = vec![0.0f32; p * d];
        for i in 0..p {
            pos_emb[i * d + pos + i] = 1.0;
        }

        let zeros = |rows: usize, cols: usize| vec![0.0f32; rows * cols];
        let mut s = TensorStore::new();
        let mut put = |name: &str, shape: &[usize], data: &[f32]| {
            s.insert_f32(name, shape, data).expect("fresh names");
        };
        put("tok_embeddings.weight", &[v, d], &tok_emb);
        put("pos_embeddings.weight", &[p, d], &pos_emb);

        // Layer 0: previous-token head in rows [0, dh).
        let mut wq = zeros(width, d);
        let mut wk = zeros(width, d);
        let mut wv = zeros(width, d);
        let mut wo = zeros(d, width);
        for r in 0..p - 1 {
            wq[r * d + pos + r + 1] = self.prev_sharpness * score_scale;
        }
        for r in 0..p {
            wk[r * d + pos + r] = 1.0;
        }
        for r in 0..v {
            wv[r * d + tok + r] = 1.0;
            wo[(prev + r) * width + r] = 1.0;
        }
        put("layers.0.attn.wq", &[width, d], &wq);
        put("layers.0.attn.wk", &[width, d], &wk);
        put("layers.0.attn.wv", &[width, d], &wv);
        put("layers.0.attn.wo", &[d, width], &wo);

        // Layer 1: induction head in rows [0, dh).
        let mut wq = zeros(width, d);
        let mut wk = zeros(width, d);
        let mut wv = zeros(width, d);
        let mut wo = zeros(d, width);
        for r in 0..v {
            wq[r * d + tok + r] = self.induction_sharpness * score_scale;
            wk[r * d + prev + r] = 1.0;
            wk[r * d + tok + r] = self.key_self_weight;
            wv[r * d + tok + r] = 1.0;
            wo[(outb + r) * width + r] = 1.0;
        }
        put("layers.1.attn.wq", &[width, d], &wq);
        put("layers.1.attn.wk", &[width, d], &wk);
        put("layers.1.attn.wv", &[width, d], &wv);
        put("layers.1.attn.wo", &[d, width], &wo);

        // Norm weights undo the RMS rescaling for the expected residual norms
        // (two unit blocks before layer 0, three before layer 1).
        let scaled = |blocks: f32| vec![(blocks / d as f32).sqrt(); d];
        put("layers.0.attn_norm.weight", &[d], &scaled(2.0));
        put("layers.1.attn_norm.weight", &[d], &scaled(3.0));
        for l in 0..2 {
            put(&format!("layers.{l}.mlp_norm.weight"), &[d], &vec![1.0; d]);
            put(&format!("layers.{l}.mlp.w1"), &[1, d], &zeros(1, d));
            put(&format!("layers.{l}.mlp.w2"), &[d, 1], &zeros(d, 1));
        }
        put("final_norm.weight", &[d], &vec![1.0; d]);
        let mut lm_head = zeros(v, d);
        for t in 0..v {
            lm_head[t * d + outb + t] = 1.0;
        }
        put("lm_head.weight", &[v, d], &lm_head);
        s
    }

    pub fn model(&self) -> Result<Model> {
        load_model(&self.store(), self.config())
    }
}
