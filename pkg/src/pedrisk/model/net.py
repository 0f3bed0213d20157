"""Model weights, exact forward/backward math, Adam updates, risk-factor ranking.

Architecture: summed id embeddings per time bin -> stacked LSTM layers ->
additive attention pooling over the top-layer hidden states -> concatenation
with the demographic embedding -> three horizon heads, each a two-layer MLP
(LeakyReLU, dropout in training) emitting a 2-way softmax and a scalar BMI.

All math is numpy with the recurrent/embedding kernels dispatched through
kernels.py. Weights default to float32; gradient checks cast to float64 via
ModelWeights.astype.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import AllMasked, NonFiniteGradient, ShapeMismatch, UnknownId
from . import kernels
from .config import ModelConfig

PROB_EPS = 1e-12
GRAD_CLIP_NORM = 5.0


def param_specs(config: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """Ordered (name, shape, init_kind) for every learnable tensor."""
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("embed", (config.vocab_size, config.embed_dim), "embed"),
    ]
    din = config.embed_dim
    for layer in range(config.lstm_layers):
        specs.append((f"lstm{layer}_w", (din, 4 * config.lstm_hidden), "dense"))
        specs.append((f"lstm{layer}_r", (config.lstm_hidden, 4 * config.lstm_hidden), "dense"))
        specs.append((f"lstm{layer}_b", (4 * config.lstm_hidden,), "lstm_bias"))
        din = config.lstm_hidden
    specs.append(("attn_w", (config.lstm_hidden, config.attn_dim), "dense"))
    specs.append(("attn_b", (config.attn_dim,), "bias"))
    specs.append(("attn_v", (config.attn_dim,), "vector"))
    for i, card in enumerate(config.demo_cardinalities):
        specs.append((f"demo{i}_embed", (card, config.demo_embed_dim), "embed"))
    h1, h2 = config.head_hidden
    for k in range(config.horizons):
        specs.append((f"head{k}_w1", (config.context_dim, h1), "dense"))
        specs.append((f"head{k}_b1", (h1,), "bias"))
        specs.append((f"head{k}_w2", (h1, h2), "dense"))
        specs.append((f"head{k}_b2", (h2,), "bias"))
        specs.append((f"head{k}_wc", (h2, 2), "dense"))
        specs.append((f"head{k}_bc", (2,), "bias"))
        specs.append((f"head{k}_wr", (h2, 1), "dense"))
        specs.append((f"head{k}_br", (1,), "bias"))
    return specs


@dataclass
class ModelWeights:
    config: ModelConfig
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.arrays.items()},
                            dict(self.meta))

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()},
                            dict(self.meta))

    @property
    def dtype(self):
        return self.arrays["embed"].dtype

    def check_finite(self) -> None:
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise NonFiniteGradient(f"non-finite values in {name}")

    def validate_shapes(self) -> None:
        expected = {name: shape for name, shape, _ in param_specs(self.config)}
        actual = {name: tuple(a.shape) for name, a in self.arrays.items()}
        if expected != actual:
            missing = set(expected) ^ set(actual)
            raise ShapeMismatch(f"weight tensors do not match config: {missing or 'shapes'}")


def init(config: ModelConfig, dtype=np.float32) -> ModelWeights:
    """Deterministic initialization: uniform(+-1/sqrt(fan_in)) for dense blocks,
    small normal embeddings, zero biases with forget-gate bias 1."""
    rng = np.random.default_rng(config.seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape, kind in param_specs(config):
        if kind == "embed":
            arr = rng.normal(0.0, 0.01, size=shape)
        elif kind == "dense":
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "vector":
            bound = 1.0 / np.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        elif kind == "lstm_bias":
            arr = np.zeros(shape)
            hidden = shape[0] // 4
            arr[hidden:2 * hidden] = 1.0
        else:
            arr = np.zeros(shape)
        arrays[name] = np.ascontiguousarray(arr.astype(dtype))
    return ModelWeights(config=config, arrays=arrays, meta={})


# --- batches -----------------------------------------------------------------

@dataclass
class Batch:
    """Padded, flattened batch: event triples plus per-example masks and labels."""

    ids: np.ndarray          # (n_events,) int64
    t_idx: np.ndarray        # (n_events,) int64
    b_idx: np.ndarray        # (n_events,) int64
    bin_mask: np.ndarray     # (B, T) 1.0 where the bin exists for the example
    demo: np.ndarray         # (B, 6) int64
    label_obese: np.ndarray  # (B, 3)
    label_bmi: np.ndarray    # (B, 3)
    mask: np.ndarray         # (B, 3) 1.0 where ground truth exists

    @property
    def size(self) -> int:
        return self.bin_mask.shape[0]

    @property
    def n_bins(self) -> int:
        return self.bin_mask.shape[1]


def make_batch(sequences, demos, label_obese=None, label_bmi=None, mask=None) -> Batch:
    """Pad a list of TimeBinnedSequence + DemographicVector into one Batch."""
    batch = len(sequences)
    n_bins = max(len(s.bins) for s in sequences)
    ids, t_idx, b_idx = [], [], []
    bin_mask = np.zeros((batch, n_bins))
    for b, seq in enumerate(sequences):
        bin_mask[b, :len(seq.bins)] = 1.0
        for t, active in enumerate(seq.bins):
            for input_id in active:
                ids.append(input_id)
                t_idx.append(t)
                b_idx.append(b)
    demo = np.array([d.as_tuple() for d in demos], dtype=np.int64)
    zeros = np.zeros((batch, 3))
    return Batch(
        ids=np.asarray(ids, dtype=np.int64),
        t_idx=np.asarray(t_idx, dtype=np.int64),
        b_idx=np.asarray(b_idx, dtype=np.int64),
        bin_mask=bin_mask,
        demo=demo,
        label_obese=zeros if label_obese is None else np.asarray(label_obese, dtype=np.float64),
        label_bmi=zeros if label_bmi is None else np.asarray(label_bmi, dtype=np.float64),
        mask=np.ones((batch, 3)) if mask is None else np.asarray(mask, dtype=np.float64),
    )


def _validate_batch(weights: ModelWeights, batch: Batch) -> None:
    cfg = weights.config
    if batch.ids.size and (batch.ids.min() < 0 or batch.ids.max() >= cfg.vocab_size):
        raise UnknownId(f"input ids outside [0, {cfg.vocab_size})")
    if batch.demo.shape[1] != len(cfg.demo_cardinalities):
        raise ShapeMismatch("demographic vector width mismatch")
    for i, card in enumerate(cfg.demo_cardinalities):
        col = batch.demo[:, i]
        if col.min() < 0 or col.max() >= card:
            raise ShapeMismatch(f"demographic field {i} index outside [0, {card})")


def _leaky(a, slope):
    return np.where(a > 0, a, slope * a)


def _leaky_grad(a, slope):
    return np.where(a > 0, 1.0, slope).astype(a.dtype)


def _softmax_rows(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_internal(weights: ModelWeights, batch: Batch, train_mode: bool, rng):
    """Run the batched forward pass; returns outputs plus the backward cache."""
    _validate_batch(weights, batch)
    cfg = weights.config
    w = weights.arrays
    dtype = weights.dtype
    n_bins, b_sz = batch.n_bins, batch.size

    x = kernels.embed_sum(batch.ids, batch.t_idx, batch.b_idx, w["embed"], n_bins, b_sz)

    layer_inputs, layer_h, layer_c, layer_gates = [], [], [], []
    inp = x
    for layer in range(cfg.lstm_layers):
        h, c, gates = kernels.lstm_forward(
            inp, w[f"lstm{layer}_w"], w[f"lstm{layer}_r"], w[f"lstm{layer}_b"])
        layer_inputs.append(inp)
        layer_h.append(h)
        layer_c.append(c)
        layer_gates.append(gates)
        inp = h
    top = layer_h[-1]                                  # (T, B, H)

    mask_t = np.ascontiguousarray(batch.bin_mask.T).astype(dtype)   # (T, B)
    u = np.tanh(top @ w["attn_w"] + w["attn_b"])       # (T, B, A)
    scores = u @ w["attn_v"]                           # (T, B)
    neg_inf = np.array(-np.inf, dtype=dtype)
    masked_scores = np.where(mask_t > 0, scores, neg_inf)
    shifted = masked_scores - masked_scores.max(axis=0, keepdims=True)
    exp_scores = np.exp(shifted)
    attn = exp_scores / exp_scores.sum(axis=0, keepdims=True)       # (T, B)
    context = np.einsum("tb,tbh->bh", attn, top)

    demo_parts = [w[f"demo{i}_embed"][batch.demo[:, i]]
                  for i in range(len(cfg.demo_cardinalities))]
    demo_vec = np.concatenate(demo_parts, axis=1)
    z = np.concatenate([context, demo_vec], axis=1)    # (B, Z)

    heads = []
    probs = np.zeros((b_sz, cfg.horizons, 2), dtype=dtype)
    bmi = np.zeros((b_sz, cfg.horizons), dtype=dtype)
    for k in range(cfg.horizons):
        a1 = z @ w[f"head{k}_w1"] + w[f"head{k}_b1"]
        r1 = _leaky(a1, cfg.leaky_relu_slope)
        a2 = r1 @ w[f"head{k}_w2"] + w[f"head{k}_b2"]
        r2 = _leaky(a2, cfg.leaky_relu_slope)
        if train_mode and cfg.dropout > 0.0:
            if rng is None:
                raise ShapeMismatch("train_mode forward needs an rng for dropout")
            keep = (rng.random(r2.shape) >= cfg.dropout).astype(dtype)
            drop_mask = keep / (1.0 - cfg.dropout)
        else:
            drop_mask = np.ones_like(r2)
        d = r2 * drop_mask
        logits = d @ w[f"head{k}_wc"] + w[f"head{k}_bc"]
        probs[:, k, :] = _softmax_rows(logits)
        bmi[:, k] = (d @ w[f"head{k}_wr"] + w[f"head{k}_br"])[:, 0]
        heads.append({"a1": a1, "r1": r1, "a2": a2, "drop_mask": drop_mask, "d": d})

    cache = {
        "x": x, "layer_inputs": layer_inputs, "layer_h": layer_h, "layer_c": layer_c,
        "layer_gates": layer_gates, "top": top, "u": u, "attn": attn, "mask_t": mask_t,
        "context": context, "z": z, "heads": heads,
    }
    return probs, bmi, attn, cache


@dataclass
class ModelOutput:
    probs: np.ndarray        # (3, 2) softmax pairs per horizon
    prob_obese: np.ndarray   # (3,)
    bmi_pred: np.ndarray     # (3,)
    attention: np.ndarray    # (T,) nonnegative, sums to 1
    salience: dict[int, float]


def forward(weights: ModelWeights, sequence, demo, train_mode: bool = False,
            rng=None) -> ModelOutput:
    """Single-example forward pass; salience follows the additive-attention rule
    salience(id) = sum_t attention_t * [id active in bin t] * ||embedding(id)||,
    normalized to sum 1 over active ids."""
    batch = make_batch([sequence], [demo])
    probs, bmi, attn, _ = _forward_internal(weights, batch, train_mode, rng)
    attention = attn[:, 0]

    norms: dict[int, float] = {}
    raw: dict[int, float] = {}
    for t, active in enumerate(sequence.bins):
        for input_id in active:
            if input_id not in norms:
                norms[input_id] = float(np.linalg.norm(weights.arrays["embed"][input_id]))
            raw[input_id] = raw.get(input_id, 0.0) + float(attention[t]) * norms[input_id]
    total = sum(raw.values())
    salience = {i: (v / total if total > 0 else 0.0) for i, v in sorted(raw.items())}

    return ModelOutput(
        probs=probs[0],
        prob_obese=probs[0, :, 1].copy(),
        bmi_pred=bmi[0].copy(),
        attention=attention.copy(),
        salience=salience,
    )


# --- loss --------------------------------------------------------------------

def loss_single(output: ModelOutput, label_obese, label_bmi, mask, loss_lambda: float) -> float:
    """Mean over unmasked horizons of cross-entropy + lambda * squared error."""
    total, n = 0.0, 0
    for k in range(3):
        if not mask[k]:
            continue
        p_true = float(output.probs[k, 1] if label_obese[k] else output.probs[k, 0])
        ce = -np.log(max(p_true, PROB_EPS))
        se = (float(output.bmi_pred[k]) - float(label_bmi[k])) ** 2
        total += ce + loss_lambda * se
        n += 1
    if n == 0:
        raise AllMasked("no unmasked horizon")
    return float(total / n)


def loss_and_grads(weights: ModelWeights, batch: Batch, train_mode: bool = False,
                   rng=None):
    """Batch loss (mean over examples of the per-example horizon mean) and exact
    gradients for every parameter tensor."""
    cfg = weights.config
    w = weights.arrays
    dtype = weights.dtype
    probs, bmi, attn, cache = _forward_internal(weights, batch, train_mode, rng)

    mask = batch.mask.astype(dtype)
    per_example = mask.sum(axis=1)
    valid = per_example > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllMasked("every horizon of every example is masked")
    weight_bk = np.zeros_like(mask)
    weight_bk[valid] = mask[valid] / per_example[valid, None] / n_valid

    labels = batch.label_obese.astype(dtype)
    target_bmi = batch.label_bmi.astype(dtype)
    p_true = np.where(labels > 0.5, probs[:, :, 1], probs[:, :, 0])
    ce = -np.log(np.maximum(p_true, PROB_EPS))
    se = (bmi - target_bmi) ** 2
    loss = float(np.sum(weight_bk * (ce + cfg.loss_lambda * se)))

    grads = {name: np.zeros_like(arr) for name, arr in w.items()}
    z = cache["z"]
    dz = np.zeros_like(z)
    for k in range(cfg.horizons):
        head = cache["heads"][k]
        onehot = np.stack([1.0 - labels[:, k], labels[:, k]], axis=1).astype(dtype)
        dlogits = (probs[:, k, :] - onehot) * weight_bk[:, k:k + 1]
        dbmi = (2.0 * cfg.loss_lambda * (bmi[:, k] - target_bmi[:, k]) * weight_bk[:, k])
        d = head["d"]
        grads[f"head{k}_wc"] = d.T @ dlogits
        grads[f"head{k}_bc"] = dlogits.sum(axis=0)
        grads[f"head{k}_wr"] = d.T @ dbmi[:, None]
        grads[f"head{k}_br"] = np.array([dbmi.sum()], dtype=dtype)
        dd = dlogits @ w[f"head{k}_wc"].T + dbmi[:, None] * w[f"head{k}_wr"][:, 0][None, :]
        dr2 = dd * head["drop_mask"]
        da2 = dr2 * _leaky_grad(head["a2"], cfg.leaky_relu_slope)
        grads[f"head{k}_w2"] = head["r1"].T @ da2
        grads[f"head{k}_b2"] = da2.sum(axis=0)
        dr1 = da2 @ w[f"head{k}_w2"].T
        da1 = dr1 * _leaky_grad(head["a1"], cfg.leaky_relu_slope)
        grads[f"head{k}_w1"] = z.T @ da1
        grads[f"head{k}_b1"] = da1.sum(axis=0)
        dz += da1 @ w[f"head{k}_w1"].T

    hidden = cfg.lstm_hidden
    dcontext = dz[:, :hidden]
    ddemo = dz[:, hidden:]
    for i in range(len(cfg.demo_cardinalities)):
        sl = ddemo[:, i * cfg.demo_embed_dim:(i + 1) * cfg.demo_embed_dim]
        np.add.at(grads[f"demo{i}_embed"], batch.demo[:, i], sl)

    top, u, attn_w = cache["top"], cache["u"], w["attn_w"]
    dattn = np.einsum("bh,tbh->tb", dcontext, top)
    dh_top = attn[:, :, None] * dcontext[None, :, :]
    sum_term = (attn * dattn).sum(axis=0)
    dscores = attn * (dattn - sum_term[None, :])
    du = dscores[:, :, None] * w["attn_v"][None, None, :]
    grads["attn_v"] = np.einsum("tba,tb->a", u, dscores)
    dpre = du * (1.0 - u * u)
    t_flat = top.reshape(-1, hidden)
    grads["attn_w"] = t_flat.T @ dpre.reshape(-1, cfg.attn_dim)
    grads["attn_b"] = dpre.sum(axis=(0, 1))
    dh_top = dh_top + dpre @ attn_w.T

    dh = dh_top
    for layer in range(cfg.lstm_layers - 1, -1, -1):
        dx_layer, dw_l, dr_l, db_l = kernels.lstm_backward(
            np.ascontiguousarray(dh),
            cache["layer_inputs"][layer], cache["layer_h"][layer],
            cache["layer_c"][layer], cache["layer_gates"][layer],
            w[f"lstm{layer}_w"], w[f"lstm{layer}_r"])
        grads[f"lstm{layer}_w"] = dw_l
        grads[f"lstm{layer}_r"] = dr_l
        grads[f"lstm{layer}_b"] = db_l
        dh = dx_layer

    grads["embed"] = kernels.embed_backward(
        np.ascontiguousarray(dh), batch.ids, batch.t_idx, batch.b_idx, cfg.vocab_size)

    aux = {"probs": probs, "bmi": bmi, "attention": attn}
    return loss, grads, aux


def eval_loss(weights: ModelWeights, batch: Batch) -> float:
    """Forward-only batch loss with dropout disabled."""
    cfg = weights.config
    probs, bmi, _, _ = _forward_internal(weights, batch, train_mode=False, rng=None)
    mask = batch.mask.astype(weights.dtype)
    per_example = mask.sum(axis=1)
    valid = per_example > 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise AllMasked("every horizon of every example is masked")
    weight_bk = np.zeros_like(mask)
    weight_bk[valid] = mask[valid] / per_example[valid, None] / n_valid
    labels = batch.label_obese.astype(weights.dtype)
    p_true = np.where(labels > 0.5, probs[:, :, 1], probs[:, :, 0])
    ce = -np.log(np.maximum(p_true, PROB_EPS))
    se = (bmi - batch.label_bmi.astype(weights.dtype)) ** 2
    return float(np.sum(weight_bk * (ce + cfg.loss_lambda * se)))


def predict_batch(weights: ModelWeights, batch: Batch):
    """Eval-mode scores: (probs_obese (B, 3), bmi_pred (B, 3))."""
    probs, bmi, _, _ = _forward_internal(weights, batch, train_mode=False, rng=None)
    return probs[:, :, 1].astype(np.float64), bmi.astype(np.float64)


# --- optimizer ----------------------------------------------------------------

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @classmethod
    def for_weights(cls, weights: ModelWeights, seed: int = 0) -> "AdamState":
        state = cls(rng=np.random.default_rng(seed))
        for name, arr in weights.arrays.items():
            state.m[name] = np.zeros_like(arr)
            state.v[name] = np.zeros_like(arr)
        return state


def clip_grad_norm(grads: dict, max_norm: float = GRAD_CLIP_NORM) -> float:
    total = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2))
                              for g in grads.values())))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


def backward_and_step(weights: ModelWeights, batch: Batch, opt: AdamState, lr: float):
    """One training step: exact gradients, global-norm clip at 5.0, Adam update.

    A non-finite gradient aborts the step (weights untouched) and raises.
    Returns the same weights object and {loss, grad_norm}.
    """
    loss, grads, _ = loss_and_grads(weights, batch, train_mode=True, rng=opt.rng)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"gradient for {name} is not finite")
    grad_norm = clip_grad_norm(grads)
    opt.step += 1
    bc1 = 1.0 - opt.beta1 ** opt.step
    bc2 = 1.0 - opt.beta2 ** opt.step
    for name, arr in weights.arrays.items():
        g = grads[name]
        opt.m[name] = opt.beta1 * opt.m[name] + (1.0 - opt.beta1) * g
        opt.v[name] = opt.beta2 * opt.v[name] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[name] / bc1
        v_hat = opt.v[name] / bc2
        arr -= (lr * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(arr.dtype)
    return weights, {"loss": loss, "grad_norm": grad_norm}


# --- interpretation ------------------------------------------------------------

def rank_risk_factors(output: ModelOutput, sequence, registry, k: int = 5):
    """Top-k risk factors: salience aggregated per feature, scores normalized
    to sum 1 over the returned items. Returns (label, domain, score) tuples."""
    by_feature: dict[int, float] = {}
    for input_id, score in output.salience.items():
        fid, _ = registry.owner_of(input_id)
        by_feature[fid] = by_feature.get(fid, 0.0) + score
    if not by_feature:
        return []
    ranked = sorted(by_feature.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    total = sum(score for _, score in ranked)
    out = []
    for fid, score in ranked:
        spec = registry.spec(fid)
        out.append((spec.label, spec.domain,
                    score / total if total > 0 else 1.0 / len(ranked)))
    return out
