//! Decoder-only transformer forward pass with attention and hidden-state capture.
//!
//! Pre-norm blocks: `x += Attn(Norm(x)); x += Mlp(Norm(x))`, then a final norm
//! and an untied LM head. Weight names:
//!
//! | tensor                          | shape                          |
//! |---------------------------------|--------------------------------|
//! | `tok_embeddings.weight`         | `[vocab_size, d_model]`        |
//! | `pos_embeddings.weight`         | `[max_seq, d_model]` (learned) |
//! | `layers.{i}.attn_norm.weight`   | `[d_model]` (+ `.bias` for layernorm) |
//! | `layers.{i}.attn.wq`            | `[n_heads * d_head, d_model]`  |
//! | `layers.{i}.attn.wk` / `wv`     | `[n_kv_heads * d_head, d_model]` |
//! | `layers.{i}.attn.wo`            | `[d_model, n_heads * d_head]`  |
//! | `layers.{i}.mlp_norm.weight`    | `[d_model]` (+ `.bias`)        |
//! | `layers.{i}.mlp.w1` / `w3`      | `[d_ff, d_model]` (`w3` gated only) |
//! | `layers.{i}.mlp.w2`             | `[d_model, d_ff]`              |
//! | `final_norm.weight`             | `[d_model]` (+ `.bias`)        |
//! | `lm_head.weight`                | `[vocab_size, d_model]`        |
//!
//! Rotary embeddings rotate interleaved pairs `(2i, 2i+1)` of each head by
//! `pos * base^(-2i / d_head)`. GELU uses the tanh approximation.

pub mod planted;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_in_place, Matrix};
use crate::tensor_io::TensorStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosKind {
    Learned,
    Rotary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActKind {
    Gelu,
    SiluGated,
}

fn default_eps() -> f32 {
    1e-5
}

fn default_rope_base() -> f32 {
    10_000.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub norm_kind: NormKind,
    pub pos_kind: PosKind,
    pub act_kind: ActKind,
    pub max_seq: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.d_head == 0 {
            return fail("n_layers, n_heads, d_model and d_head must be positive".into());
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return fail("vocab_size and max_seq must be positive".into());
        }
        if self.n_kv_heads == 0 || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_kv_heads ({}) must divide n_heads ({})",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.pos_kind == PosKind::Rotary && !self.d_head.is_multiple_of(2) {
            return fail(format!("rotary embeddings need an even d_head, got {}", self.d_head));
        }
        Ok(())
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads per shared key/value group.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn has_norm_bias(&self) -> bool {
        self.norm_kind == NormKind::LayerNorm
    }
}

/// Per-head query and key projections, each `d_head × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Matrix,
    pub wk: Matrix,
}

#[derive(Debug, Clone)]
struct Norm {
    weight: Vec<f32>,
    bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone)]
struct Layer {
    attn_norm: Norm,
    wq: Matrix,
    wk: Matrix,
    wv: Matrix,
    wo: Matrix,
    mlp_norm: Norm,
    w1: Matrix,
    w2: Matrix,
    w3: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    tok_emb: Matrix,
    pos_emb: Option<Matrix>,
    layers: Vec<Layer>,
    final_norm: Norm,
    lm_head: Matrix,
}

/// What to record during a forward pass.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptureSpec {
    /// Final-position attention row of every head.
    pub attn_rows: bool,
    /// Layers whose post-norm attention inputs are kept.
    pub hidden_layers: Vec<usize>,
    /// Full `seq × seq` attention matrices (debug).
    pub full_attn: bool,
}

impl CaptureSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn attn_rows() -> Self {
        Self {
            attn_rows: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `seq × vocab_size`.
    pub logits: Matrix,
    /// `[layer][head]` → attention probabilities of the final position, length `seq`.
    pub attn_rows: Vec<Vec<Vec<f32>>>,
    /// Layer → `seq × d_model` input to that layer's attention after its norm.
    pub post_norm_hidden: BTreeMap<usize, Matrix>,
    /// `[layer][head]` → `seq × seq`, only in debug mode.
    pub full_attn: Vec<Vec<Matrix>>,
}

impl ForwardOutput {
    pub fn last_logits(&self) -> &[f32] {
        self.logits.row(self.logits.rows - 1)
    }
}

fn layer_name(i: usize, suffix: &str) -> String {
    format!("layers.{i}.{suffix}")
}

fn load_matrix(store: &TensorStore, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let t = store.get_shaped(name, &[rows, cols])?;
    Ok(Matrix::from_vec(rows, cols, t.data))
}

fn load_norm(store: &TensorStore, prefix: &str, cfg: &ModelConfig) -> Result<Norm> {
    let weight = store.get_shaped(&format!("{prefix}.weight"), &[cfg.d_model])?.data;
    let bias = if cfg.has_norm_bias() {
        Some(store.get_shaped(&format!("{prefix}.bias"), &[cfg.d_model])?.data)
    } else {
        None
    };
    Ok(Norm { weight, bias })
}

pub fn load_model(store: &TensorStore, config: ModelConfig) -> Result<Model> {
    config.validate()?;
    let c = &config;
    let tok_emb = load_matrix(store, "tok_embeddings.weight", c.vocab_size, c.d_model)?;
    let pos_emb = match c.pos_kind {
        PosKind::Learned => Some(load_matrix(store, "pos_embeddings.weight", c.max_seq, c.d_model)?),
        PosKind::Rotary => None,
    };
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        layers.push(Layer {
            attn_norm: load_norm(store, &layer_name(i, "attn_norm"), c)?,
            wq: load_matrix(store, &layer_name(i, "attn.wq"), c.attn_width(), c.d_model)?,
            wk: load_matrix(store, &layer_name(i, "attn.wk"), c.kv_width(), c.d_model)?,
            wv: load_matrix(store, &layer_name(i, "attn.wv"), c.kv_width(), c.d_model)?,
            wo: load_matrix(store, &layer_name(i, "attn.wo"), c.d_model, c.attn_width())?,
            mlp_norm: load_norm(store, &layer_name(i, "mlp_norm"), c)?,
            w1: load_matrix(store, &layer_name(i, "mlp.w1"), c.d_ff, c.d_model)?,
            w2: load_matrix(store, &layer_name(i, "mlp.w2"), c.d_model, c.d_ff)?,
            w3: match c.act_kind {
                ActKind::SiluGated => Some(load_matrix(store, &layer_name(i, "mlp.w3"), c.d_ff, c.d_model)?),
                ActKind::Gelu => None,
            },
        });
    }
    Ok(Model {
        final_norm: load_norm(store, "final_norm", c)?,
        lm_head: load_matrix(store, "lm_head.weight", c.vocab_size, c.d_model)?,
        tok_emb,
        pos_emb,
        layers,
        config,
    })
}

fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

impl Norm {
    fn apply(&self, x: &[f32], kind: NormKind, eps: f32) -> Vec<f32> {
        let n = x.len() as f32;
        match kind {
            NormKind::RmsNorm => {
                let ms = x.iter().map(|v| v * v).sum::<f32>() / n;
                let inv = 1.0 / (ms + eps).sqrt();
                x.iter().zip(&self.weight).map(|(v, w)| v * inv * w).collect()
            }
            NormKind::LayerNorm => {
                let mean = x.iter().sum::<f32>() / n;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let bias = self.bias.as_deref();
                x.iter()
                    .enumerate()
                    .map(|(i, v)| (v - mean) * inv * self.weight[i] + bias.map_or(0.0, |b| b[i]))
                    .collect()
            }
        }
    }
}

fn apply_rotary(v: &mut [f32], pos: usize, base: f32) {
    let d = v.len();
    for p in 0..d / 2 {
        let theta = pos as f32 * base.powf(-((2 * p) as f32) / d as f32);
        let (sin, cos) = theta.sin_cos();
        let (a, b) = (v[2 * p], v[2 * p + 1]);
        v[2 * p] = a * cos - b * sin;
        v[2 * p + 1] = a * sin + b * cos;
    }
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Per-head slices of the fused query/key projections. With grouped
    /// queries the key slice is the one shared by the head's group.
    pub fn head_qk(&self, layer: usize, head: usize) -> Result<HeadWeights> {
        let c = &self.config;
        if layer >= c.n_layers {
            return Err(Error::IndexOutOfRange {
                what: "layer",
                index: layer,
                limit: c.n_layers,
            });
        }
        if head >= c.n_heads {
            return Err(Error::IndexOutOfRange {
                what: "head",
                index: head,
                limit: c.n_heads,
            });
        }
        let l = &self.layers[layer];
        let group = head / c.group_size();
        Ok(HeadWeights {
            wq: l.wq.row_slice(head * c.d_head, (head + 1) * c.d_head),
            wk: l.wk.row_slice(group * c.d_head, (group + 1) * c.d_head),
        })
    }

    pub fn forward(&self, tokens: &[u32], capture: &CaptureSpec) -> Result<ForwardOutput> {
        let c = &self.config;
        let seq = tokens.len();
        if seq == 0 || seq > c.max_seq {
            return Err(Error::SequenceLength {
                len: seq,
                max_seq: c.max_seq,
            });
        }
        for (position, &token) in tokens.iter().enumerate() {
            if token as usize >= c.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token,
                    position,
                    vocab_size: c.vocab_size,
                });
            }
        }
        for &l in &capture.hidden_layers {
            if l >= c.n_layers {
                return Err(Error::IndexOutOfRange {
                    what: "capture layer",
                    index: l,
                    limit: c.n_layers,
                });
            }
        }

        let mut x: Vec<Vec<f32>> = tokens
            .iter()
            .enumerate()
            .map(|(p, &t)| {
                let mut v = self.tok_emb.row(t as usize).to_vec();
                if let Some(pe) = &self.pos_emb {
                    for (a, b) in v.iter_mut().zip(pe.row(p)) {
                        *a += b;
                    }
                }
                v
            })
            .collect();

        let mut out = ForwardOutput {
            logits: Matrix::zeros(seq, c.vocab_size),
            attn_rows: Vec::new(),
            post_norm_hidden: BTreeMap::new(),
            full_attn: Vec::new(),
        };
        let scale = 1.0 / (c.d_head as f32).sqrt();
        let group = c.group_size();

        for (li, layer) in self.layers.iter().enumerate() {
            let normed: Vec<Vec<f32>> = x
                .iter()
                .map(|v| layer.attn_norm.apply(v, c.norm_kind, c.norm_eps))
                .collect();
            if capture.hidden_layers.contains(&li) {
                let data = normed.iter().flatten().copied().collect();
                out.post_norm_hidden.insert(li, Matrix::from_vec(seq, c.d_model, data));
            }

            let mut q: Vec<Vec<f32>> = normed.iter().map(|h| layer.wq.matvec(h)).collect();
            let mut k: Vec<Vec<f32>> = normed.iter().map(|h| layer.wk.matvec(h)).collect();
            let v: Vec<Vec<f32>> = normed.iter().map(|h| layer.wv.matvec(h)).collect();
            if c.pos_kind == PosKind::Rotary {
                for p in 0..seq {
                    for chunk in q[p].chunks_mut(c.d_head) {
                        apply_rotary(chunk, p, c.rope_base);
                    }
                    for chunk in k[p].chunks_mut(c.d_head) {
                        apply_rotary(chunk, p, c.rope_base);
                    }
                }
            }

            let mut concat = vec![vec![0.0f32; c.attn_width()]; seq];
            let mut layer_rows = Vec::new();
            let mut layer_full = Vec::new();
            for h in 0..c.n_heads {
                let g = h / group;
                let qs = h * c.d_head..(h + 1) * c.d_head;
                let ks = g * c.d_head..(g + 1) * c.d_head;
                let mut full = capture.full_attn.then(|| Matrix::zeros(seq, seq));
                for i in 0..seq {
                    let mut probs: Vec<f32> = (0..=i)
                        .map(|j| dot(&q[i][qs.clone()], &k[j][ks.clone()]) * scale)
                        .collect();
                    softmax_in_place(&mut probs);
                    let dst = &mut concat[i][qs.clone()];
                    for (j, &p) in probs.iter().enumerate() {
                        for (d, vv) in dst.iter_mut().zip(&v[j][ks.clone()]) {
                            *d += p * vv;
                        }
                    }
                    if let Some(m) = full.as_mut() {
                        m.row_mut(i)[..=i].copy_from_slice(&probs);
                    }
                    if capture.attn_rows && i == seq - 1 {
                        layer_rows.push(probs);
                    }
                }
                if let Some(m) = full {
                    layer_full.push(m);
                }
            }
            if capture.attn_rows {
                out.attn_rows.push(layer_rows);
            }
            if capture.full_attn {
                out.full_attn.push(layer_full);
            }

            for (xi, ci) in x.iter_mut().zip(&concat) {
                for (a, b) in xi.iter_mut().zip(layer.wo.matvec(ci)) {
                    *a += b;
                }
            }

            for xi in x.iter_mut() {
                let h = layer.mlp_norm.apply(xi, c.norm_kind, c.norm_eps);
                let mut act = layer.w1.matvec(&h);
                match (&layer.w3, c.act_kind) {
                    (Some(w3), ActKind::SiluGated) => {
                        for (a, g) in act.iter_mut().zip(w3.matvec(&h)) {
                            *a = silu(*a) * g;
                        }
                    }
                    _ => act.iter_mut().for_each(|a| *a = gelu(*a)),
                }
                for (a, b) in xi.iter_mut().zip(layer.w2.matvec(&act)) {
                    *a += b;
                }
            }
        }

        for (p, xi) in x.iter().enumerate() {
            let h = self.final_norm.apply(xi, c.norm_kind, c.norm_eps);
            out.logits.row_mut(p).copy_from_slice(&self.lm_head.matvec(&h));
        }
        Ok(out)
    }

    /// Serializes weights under the documented naming scheme.
    pub fn to_store(&self) -> TensorStore {
        let mut s = TensorStore::new();
        let mut put = |name: String, m: &Matrix| {
            s.insert_f32(name, &[m.rows, m.cols], &m.data).expect("fresh names");
        };
        put("tok_embeddings.weight".into(), &self.tok_emb);
        if let Some(pe) = &self.pos_emb {
            put("pos_embeddings.weight".into(), pe);
        }
        put("lm_head.weight".into(), &self.lm_head);
        for (i, l) in self.layers.iter().enumerate() {
            put(layer_name(i, "attn.wq"), &l.wq);
            put(layer_name(i, "attn.wk"), &l.wk);
            put(layer_name(i, "attn.wv"), &l.wv);
            put(layer_name(i, "attn.wo"), &l.wo);
            put(layer_name(i, "mlp.w1"), &l.w1);
            put(layer_name(i, "mlp.w2"), &l.w2);
            if let Some(w3) = &l.w3 {
                put(layer_name(i, "mlp.w3"), w3);
            }
        }
        let mut norms: Vec<(String, &Norm)> = vec![("final_norm".into(), &self.final_norm)];
        for (i, l) in self.layers.iter().enumerate() {
            norms.push((layer_name(i, "attn_norm"), &l.attn_norm));
            norms.push((layer_name(i, "mlp_norm"), &l.mlp_norm));
        }
        for (prefix, n) in norms {
            s.insert_f32(format!("{prefix}.weight"), &[n.weight.len()], &n.weight)
                .expect("fresh names");
            if let Some(b) = &n.bias {
                s.insert_f32(format!("{prefix}.bias"), &[b.len()], b)
                    .expect("fresh names");
            }
        }
        s
    }
}

/// Builds a store of random weights for `config` (unit-scale normal-ish
/// values from a seeded generator). Used for tests and fixtures.
pub fn random_store(config: &ModelConfig, seed: u64, scale: f32) -> TensorStore {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let c = config;
    let mut s = TensorStore::new();
    let mut put = |name: String, shape: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        s.insert_f32(name, shape, &data).expect("fresh names");
    };
    put("tok_embeddings.weight".into(), &[c.vocab_size, c.d_model], &mut rng);
    if c.pos_kind == PosKind::Learned {
        put("pos_embeddings.weight".into(), &[c.max_seq, c.d_model], &mut rng);
    }
    let norm_names: Vec<String> = (0..c.n_layers)
        .flat_map(|i| [layer_name(i, "attn_norm"), layer_name(i, "mlp_norm")])
        .chain(std::iter::once("final_norm".to_string()))
        .collect();
    for i in 0..c.n_layers {
        put(layer_name(i, "attn.wq"), &[c.attn_width(), c.d_model], &mut rng);
        put(layer_name(i, "attn.wk"), &[c.kv_width(), c.d_model], &mut rng);
        put(layer_name(i, "attn.wv"), &[c.kv_width(), c.d_model], &mut rng);
        put(layer_name(i, "attn.wo"), &[c.d_model, c.attn_width()], &mut rng);
        put(layer_name(i, "mlp.w1"), &[c.d_ff, c.d_model], &mut rng);
        put(layer_name(i, "mlp.w2"), &[c.d_model, c.d_ff], &mut rng);
        if c.act_kind == ActKind::SiluGated {
            put(layer_name(i, "mlp.w3"), &[c.d_ff, c.d_model], &mut rng);
        }
    }
    put("lm_head.weight".into(), &[c.vocab_size, c.d_model], &mut rng);
    for prefix in norm_names {
        let w: Vec<f32> = (0..c.d_model).map(|_| 1.0 + rng.gen_range(-0.1..0.1)).collect();
        s.insert_f32(format!("{prefix}.weight"), &[c.d_model], &w).expect("fresh names");
        if c.has_norm_bias() {
            let b: Vec<f32> = (0..c.d_model).map(|_| rng.gen_range(-0.1..0.1)).collect();
            s.insert_f32(format!("{prefix}.bias"), &[c.d_model], &b).expect("fresh names");
        }
    }
    s
}
