"""Regenerates the pinned toy checkpoints, reference outputs and capture fixture.

Run once from this directory:  python3 make_fixtures.py
Everything here is an independent float64 numpy implementation; the Rust
tests compare against the files it writes.
"""

import json
import struct

import numpy as np

DTYPE = "F32"


def save_safetensors(path, tensors, metadata=None):
    header = {}
    offset = 0
    blobs = []
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        header[name] = {"dtype": DTYPE, "shape": list(arr.shape), "data_offsets": [offset, offset + len(raw)]}
        offset += len(raw)
        blobs.append(raw)
    if metadata:
        header["__metadata__"] = metadata
    text = json.dumps(header, separators=(",", ":")).encode()
    text += b" " * ((8 - len(text) % 8) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text)
        for raw in blobs:
            f.write(raw)


def rand_weights(cfg, rng, scale=0.5):
    d, v = cfg["d_model"], cfg["vocab_size"]
    aw = cfg["n_heads"] * cfg["d_head"]
    kw = cfg["n_kv_heads"] * cfg["d_head"]
    ff = cfg["d_ff"]

    def m(*shape):
        return (rng.standard_normal(shape) * scale / np.sqrt(shape[-1])).astype(np.float32)

    def normw():
        return (1.0 + 0.1 * rng.standard_normal(d)).astype(np.float32)

    w = {"tok_embeddings.weight": m(v, d) * 4, "lm_head.weight": m(v, d)}
    if cfg["pos_kind"] == "learned":
        w["pos_embeddings.weight"] = m(cfg["max_seq"], d) * 4
    norms = ["final_norm"]
    for i in range(cfg["n_layers"]):
        p = f"layers.{i}."
        w[p + "attn.wq"] = m(aw, d) * 3
        w[p + "attn.wk"] = m(kw, d) * 3
        w[p + "attn.wv"] = m(kw, d)
        w[p + "attn.wo"] = m(d, aw)
        w[p + "mlp.w1"] = m(ff, d)
        w[p + "mlp.w2"] = m(d, ff)
        if cfg["act_kind"] == "silu-gated":
            w[p + "mlp.w3"] = m(ff, d)
        norms += [p + "attn_norm", p + "mlp_norm"]
    for n in norms:
        w[n + ".weight"] = normw()
        if cfg["norm_kind"] == "layernorm":
            w[n + ".bias"] = (0.1 * rng.standard_normal(d)).astype(np.float32)
    return w


def norm(x, w, b, cfg):
    eps = cfg.get("norm_eps", 1e-5)
    if cfg["norm_kind"] == "rmsnorm":
        return x / np.sqrt((x * x).mean(-1, keepdims=True) + eps) * w
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * w + b


def rope(t, base):
    # t: [seq, heads, dh]; rotate interleaved pairs.
    seq, _, dh = t.shape
    out = t.copy()
    for pos in range(seq):
        for i in range(dh // 2):
            th = pos * base ** (-(2 * i) / dh)
            c, s = np.cos(th), np.sin(th)
            a, b = t[pos, :, 2 * i].copy(), t[pos, :, 2 * i + 1].copy()
            out[pos, :, 2 * i] = a * c - b * s
            out[pos, :, 2 * i + 1] = a * s + b * c
    return out


def gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def forward(w, cfg, tokens):
    w = {k: v.astype(np.float64) for k, v in w.items()}
    seq = len(tokens)
    H, KV, dh = cfg["n_heads"], cfg["n_kv_heads"], cfg["d_head"]
    x = w["tok_embeddings.weight"][tokens]
    if cfg["pos_kind"] == "learned":
        x = x + w["pos_embeddings.weight"][:seq]
    nb = lambda p: w.get(p + ".bias")
    hidden, rows = [], []
    for i in range(cfg["n_layers"]):
        p = f"layers.{i}."
        h = norm(x, w[p + "attn_norm.weight"], nb(p + "attn_norm"), cfg)
        hidden.append(h)
        q = (h @ w[p + "attn.wq"].T).reshape(seq, H, dh)
        k = (h @ w[p + "attn.wk"].T).reshape(seq, KV, dh)
        v = (h @ w[p + "attn.wv"].T).reshape(seq, KV, dh)
        if cfg["pos_kind"] == "rotary":
            q, k = rope(q, cfg.get("rope_base", 10000.0)), rope(k, cfg.get("rope_base", 10000.0))
        out = np.zeros((seq, H, dh))
        layer_rows = []
        for hh in range(H):
            g = hh // (H // KV)
            s = q[:, hh] @ k[:, g].T / np.sqrt(dh)
            s = np.where(np.tril(np.ones((seq, seq))) > 0, s, -np.inf)
            s = np.exp(s - s.max(-1, keepdims=True))
            pr = s / s.sum(-1, keepdims=True)
            out[:, hh] = pr @ v[:, g]
            layer_rows.append(pr[-1])
        rows.append(layer_rows)
        x = x + out.reshape(seq, H * dh) @ w[p + "attn.wo"].T
        h = norm(x, w[p + "mlp_norm.weight"], nb(p + "mlp_norm"), cfg)
        a = h @ w[p + "mlp.w1"].T
        if cfg["act_kind"] == "silu-gated":
            a = a / (1 + np.exp(-a)) * (h @ w[p + "mlp.w3"].T)
        else:
            a = gelu(a)
        x = x + a @ w[p + "mlp.w2"].T
    logits = norm(x, w["final_norm.weight"], nb("final_norm"), cfg) @ w["lm_head.weight"].T
    return logits, np.array(rows), hidden


VARIANTS = {
    "tiny_rope": dict(
        n_layers=2, n_heads=4, n_kv_heads=2, d_model=16, d_head=4, d_ff=24, vocab_size=11,
        norm_kind="rmsnorm", pos_kind="rotary", act_kind="silu-gated", max_seq=12,
        norm_eps=1e-5, rope_base=10000.0,
    ),
    "tiny_learned": dict(
        n_layers=2, n_heads=2, n_kv_heads=2, d_model=12, d_head=6, d_ff=20, vocab_size=9,
        norm_kind="layernorm", pos_kind="learned", act_kind="gelu", max_seq=10,
        norm_eps=1e-5, rope_base=10000.0,
    ),
}


def make_models():
    for seed, (name, cfg) in enumerate(sorted(VARIANTS.items())):
        rng = np.random.default_rng(100 + seed)
        w = rand_weights(cfg, rng)
        save_safetensors(f"{name}.safetensors", w)
        tokens = rng.integers(0, cfg["vocab_size"], cfg["max_seq"]).tolist()
        logits, rows, hidden = forward(w, cfg, tokens)
        with open(f"{name}.json", "w") as f:
            json.dump(cfg, f, indent=2)
        ref = {
            "tokens": tokens,
            "logits": logits.tolist(),
            "last_attn_rows": rows.tolist(),
            "hidden_layer1": hidden[1].tolist(),
        }
        with open(f"{name}.reference.json", "w") as f:
            json.dump(ref, f)


def cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def make_capture():
    cfg = VARIANTS["tiny_rope"]
    rng = np.random.default_rng(7)
    w = rand_weights(cfg, rng)
    H, KV, dh = cfg["n_heads"], cfg["n_kv_heads"], cfg["d_head"]
    candidates = [7, 8]
    prompts = []
    for i in range(8):
        # demo layout: [x][label] pairs, query token last
        k = 3
        tokens, spans, demo_labels = [], [], []
        for _ in range(k):
            tokens.append(int(rng.integers(0, 7)))
            lab = int(rng.integers(0, 2))
            span_len = 1 + int(rng.integers(0, 2))
            spans.append([len(tokens), len(tokens) + span_len])
            tokens.append(candidates[lab])
            if span_len == 2:
                tokens.append(int(rng.integers(9, 11)))
            demo_labels.append(lab)
        tokens.append(int(rng.integers(0, 7)))
        tokens = tokens[: cfg["max_seq"]]
        prompts.append(dict(tokens=tokens, spans=spans, demo_labels=demo_labels, query_label=int(rng.integers(0, 2))))

    results = [forward(w, cfg, p["tokens"]) for p in prompts]
    scores = np.zeros((cfg["n_layers"], H))
    for p, (_, rows, _) in zip(prompts, results):
        correct = [j for s, lab in zip(p["spans"], p["demo_labels"]) if lab == p["query_label"] for j in range(*s)]
        scores += rows[:, :, correct].sum(-1)
    scores /= len(prompts)
    flat = int(np.argmax(scores))  # first max: lowest layer, then head
    bl, bh = divmod(flat, H)

    tensors, head_weights = {}, []
    for layer in range(cfg["n_layers"]):
        wq = w[f"layers.{layer}.attn.wq"]
        wk = w[f"layers.{layer}.attn.wk"]
        for hh in range(H):
            g = hh // (H // KV)
            tensors[f"w.{layer}.{hh}.q"] = wq[hh * dh : (hh + 1) * dh]
            tensors[f"w.{layer}.{hh}.k"] = wk[g * dh : (g + 1) * dh]
            head_weights.append(dict(layer=layer, head=hh, wq=f"w.{layer}.{hh}.q", wk=f"w.{layer}.{hh}.k"))

    wq = tensors[f"w.{bl}.{bh}.q"].astype(np.float64)
    wk = tensors[f"w.{bl}.{bh}.k"].astype(np.float64)
    entries = []
    for i, (p, (logits, rows, hidden)) in enumerate(zip(prompts, results)):
        h = hidden[bl]
        reps = h @ wk.T @ wq  # row j = W_Q^T W_K h_j
        labels = [reps[j] for s in p["spans"] for j in range(*s)]
        dq = reps[len(p["tokens"]) - 1]
        aff = float(np.mean([cosine(dq, l) for l in labels]))
        L = np.array(labels)
        div = float(((L - L.mean(0)) ** 2).sum() / len(labels) / len(labels))
        tensors[f"p{i}.attn"] = rows.astype(np.float32)
        tensors[f"p{i}.hidden"] = h.astype(np.float32)
        tensors[f"p{i}.logits"] = logits[-1, candidates].astype(np.float32)
        entries.append(
            dict(
                instance_id=f"cap-{i:03d}",
                capture_tensor_names=dict(attn_rows=f"p{i}.attn", hidden=f"p{i}.hidden", logits=f"p{i}.logits"),
                hidden_layer=bl,
                label_spans=p["spans"],
                demo_label_ids=p["demo_labels"],
                query_last_idx=len(p["tokens"]) - 1,
                query_label_id=p["query_label"],
                candidate_token_ids=candidates,
                token_ids=p["tokens"],
                baseline_scores={"bm25": round(float(rng.uniform(0, 3)), 6)},
                exporter_affinity=aff,
                exporter_diversity=div,
            )
        )
    save_safetensors("capture.safetensors", tensors)
    manifest = dict(
        tensor_file="capture.safetensors",
        model_config=dict(n_layers=cfg["n_layers"], n_heads=H, d_model=cfg["d_model"], d_head=dh, vocab_size=cfg["vocab_size"]),
        mode="full",
        exporter_best_head=dict(layer=bl, head=bh),
        exporter_head_scores=scores.tolist(),
        head_weights=head_weights,
        prompts=entries,
    )
    with open("capture.json", "w") as f:
        json.dump(manifest, f, indent=2)


if __name__ == "__main__":
    make_models()
    make_capture()
