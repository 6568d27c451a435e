"""Per-token explanation methods for attention models.

Generic methods (RawAtt, AttGrad, AttIN) read the single attention module of
the general models, or the classification-token row of the last layer of the
transformer averaged over heads.  Transformer-only methods (PLRP, Rollout,
TransAtt, GenAtt) aggregate over layers.  InputGrad and IG work on the token
embeddings of any model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MASK
from .models import AttentionModel, AttentionTrace, grad_wrt, predict_traced
from .tensor import Tensor

LRP_EPS = 1e-6
SINGLE_POLARITY = ("RawAtt", "AttIN", "Rollout")


@dataclass
class Explanation:
    method: str
    target: int
    weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not np.all(np.isfinite(self.weights)):
            raise ValueError(f"{self.method}: non-finite explanation weights")

    def __len__(self):
        return len(self.weights)


def _is_transformer(trace: AttentionTrace) -> bool:
    return trace.model.spec.is_transformer


def _require_attention(trace: AttentionTrace):
    if not trace.cache.attention:
        raise ValueError(f"model {trace.model.spec.name} has no attention module to explain")


def _row(trace: AttentionTrace, arr: np.ndarray) -> np.ndarray:
    """Select what a generic method reads from one attention-shaped array.

    General models: the ``(N,)`` weights.  Transformer: the last layer's
    classification-token row over input tokens, per head ``(H, N)``.
    """
    if _is_transformer(trace):
        return arr[:, 0, 1:]
    return arr


def _last(trace, per_record):
    return per_record[-1]


def raw_att(trace: AttentionTrace) -> Explanation:
    _require_attention(trace)
    a = _row(trace, _last(trace, trace.alphas))
    w = a.mean(axis=0) if a.ndim == 2 else a
    return Explanation("RawAtt", trace.predicted, w, {"heads": "mean", "layer": "last"})


def att_grad(trace: AttentionTrace, score: str = "logit") -> Explanation:
    _require_attention(trace)
    a = _row(trace, _last(trace, trace.alphas))
    g = _row(trace, _last(trace, grad_wrt(trace, "alpha", score)))
    w = a * g
    w = w.mean(axis=0) if w.ndim == 2 else w
    return Explanation("AttGrad", trace.predicted, w, {"heads": "mean", "layer": "last", "score": score})


def att_grad_ablation(trace: AttentionTrace, variant: str, score: str = "logit") -> Explanation:
    """``alpha * sign(grad)`` or ``alpha * |grad|``."""
    _require_attention(trace)
    a = _row(trace, _last(trace, trace.alphas))
    g = _row(trace, _last(trace, grad_wrt(trace, "alpha", score)))
    if variant == "sign":
        w, name = a * np.sign(g), "AttGradSign"
    elif variant == "abs":
        w, name = a * np.abs(g), "AttGradAbs"
    else:
        raise ValueError(f"unknown ablation variant {variant!r}")
    w = w.mean(axis=0) if w.ndim == 2 else w
    return Explanation(name, trace.predicted, w, {"heads": "mean", "score": score})


def att_input_norm(trace: AttentionTrace) -> Explanation:
    _require_attention(trace)
    rec = trace.cache.attention[-1]
    a = _row(trace, rec.alpha.value[0])
    norms = rec.value_norms[0]
    if _is_transformer(trace):
        w = (a * norms[:, 1:]).mean(axis=0)
    else:
        w = a * norms
    return Explanation("AttIN", trace.predicted, w, {"heads": "mean", "layer": "last"})


def input_grad(trace: AttentionTrace, score: str = "logit") -> Explanation:
    x = trace.embeddings.value[0]
    g = grad_wrt(trace, "embeddings", score)
    return Explanation("InputGrad", trace.predicted, (x * g).sum(axis=-1), {"score": score})


def mask_baseline(model: AttentionModel, n: int) -> np.ndarray:
    return np.repeat(model.embed(np.array([MASK])), n, axis=0)


def integrated_gradients(model: AttentionModel, ids, baseline="mask", steps: int = 128,
                         target: int | None = None, score: str = "logit") -> Explanation:
    """Trapezoidal path integral of embedding gradients from ``baseline``.

    ``baseline`` is ``"mask"`` (MASK embedding at every position), ``"zero"``
    or an ``(N, D)`` array.
    """
    if steps < 8:
        raise ValueError("integrated gradients needs at least 8 steps")
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    x = model.embed(ids)
    if isinstance(baseline, str):
        if baseline == "mask":
            base = mask_baseline(model, len(ids))
        elif baseline == "zero":
            base = np.zeros_like(x)
        else:
            raise ValueError(f"unknown baseline {baseline!r}")
        bname = baseline
    else:
        base = np.asarray(baseline, dtype=np.float64)
        bname = "custom"
        if base.shape != x.shape:
            raise ValueError(f"baseline shape {base.shape} does not match input {x.shape}")
    if target is None:
        target = int(np.argmax(model.logits(ids[None])[0]))
    gammas = np.linspace(0.0, 1.0, steps + 1)
    path = base[None] + gammas[:, None, None] * (x - base)[None]
    tape = T.Tape()
    emb = tape.leaf(path)
    out = model.forward(np.repeat(ids[None], steps + 1, axis=0), emb=emb)
    if score == "prob":
        out = T.softmax(out, axis=-1)
    onehot = np.zeros(out.shape)
    onehot[:, target] = 1.0
    tape.backward(T.sum(T.mul(out, Tensor(onehot))))
    g = tape.grad(emb)
    trap = np.full(steps + 1, 1.0)
    trap[0] = trap[-1] = 0.5
    avg = np.tensordot(trap, g, axes=1) / steps
    w = ((x - base) * avg).sum(axis=-1)
    return Explanation("IG", target, w, {"steps": steps, "baseline": bname, "score": score})


def random_explanation(n_tokens: int, seed: int = 0, target: int = -1) -> Explanation:
    rng = np.random.default_rng(seed)
    return Explanation("Random", target, rng.uniform(-1.0, 1.0, size=n_tokens), {"seed": seed})


# ------------------------------------------------------------------ LRP

def _stab(z: np.ndarray, eps: float) -> np.ndarray:
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def lrp_linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None, R_out: np.ndarray,
               eps: float = LRP_EPS) -> np.ndarray:
    """Epsilon rule through ``z = x @ W + b``; relevance absorbed by the
    bias and stabiliser is dropped."""
    z = x @ W
    if b is not None:
        z = z + b
    s = R_out / _stab(z, eps)
    return x * (s @ W.T)


def lrp_residual(a: np.ndarray, b: np.ndarray, R: np.ndarray, eps: float = LRP_EPS):
    s = R / _stab(a + b, eps)
    return a * s, b * s


def lrp_mix(alpha: np.ndarray, values: np.ndarray, R_out: np.ndarray, eps: float = LRP_EPS):
    """Relevance through ``out = alpha @ values`` with ``alpha`` held fixed.

    Returns ``(R_alpha, R_values)``; both sum to the relevance of ``out``.
    """
    out = alpha @ values
    s = R_out / _stab(out, eps)
    R_alpha = alpha * (s @ np.swapaxes(values, -1, -2))
    R_values = values * (np.swapaxes(alpha, -1, -2) @ s)
    return R_alpha, R_values


def lrp_mlp(x: np.ndarray, weights, biases, target: int | None = None,
            eps: float = LRP_EPS) -> tuple[np.ndarray, list[float]]:
    """Epsilon-rule relevance of the input of a dense relu network
    ``logits = W_L relu(... relu(W_1 x + b_1) ...) + b_L``.

    Returns the per-feature input relevance and the relevance total after
    each layer, starting from the target logit.
    """
    acts = [np.asarray(x, dtype=np.float64)]
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = acts[-1] @ W + (0.0 if b is None else b)
        acts.append(np.maximum(z, 0.0) if i < len(weights) - 1 else z)
    logits = acts[-1]
    target = int(np.argmax(logits)) if target is None else target
    R = np.zeros_like(logits)
    R[target] = logits[target]
    totals = [float(R.sum())]
    for a, W, b in zip(reversed(acts[:-1]), reversed(weights), reversed(biases)):
        R = lrp_linear(a, W, b, R, eps)
        totals.append(float(R.sum()))
    return R, totals


@dataclass
class RelevanceMap:
    logit: float
    alpha: list[np.ndarray]          # per attention module; (H, T, T) or (N,)
    inputs: np.ndarray | None        # transformer: relevance of layer-0 input vectors
    totals: list[float]              # summed relevance after each propagation step
    metadata: dict = field(default_factory=dict)


def propagate_relevance(trace: AttentionTrace, eps: float = LRP_EPS) -> RelevanceMap:
    """Epsilon-rule LRP from the predicted logit.

    Layer normalisation and softmax are bypassed; attention mixing is a
    linear map with the recorded weights as fixed coefficients.
    """
    cache = trace.cache
    if not cache.head:
        raise ValueError("trace is missing the classifier head cache")
    logit = float(trace.logits[trace.predicted])
    R = np.zeros_like(trace.logits)
    R[trace.predicted] = logit
    R = R[None]
    totals = [float(R.sum())]
    for x, W, b, _, _ in reversed(cache.head):
        R = lrp_linear(x, W, b, R, eps)
        totals.append(float(R.sum()))
    meta = {"rule": "epsilon", "eps": eps, "layer_norm": "bypassed", "softmax": "fixed-alpha"}

    if not trace.model.spec.is_transformer:
        if cache.keys is None:
            raise ValueError("trace is missing the attention keys cache")
        alpha = cache.attention[-1].alpha.value  # (1, N)
        R_alpha, _ = lrp_mix(alpha[:, None, :], cache.keys, R[:, None, :], eps)
        return RelevanceMap(logit, [R_alpha[0, 0]], None, totals, meta)

    spec = trace.model.spec
    P = trace.model.params
    H = spec.heads
    Tn = cache.blocks[0]["x"].shape[1]
    E = spec.embed_dim
    dh = E // H
    Rx = np.zeros((1, Tn, E))
    Rx[:, 0] = R
    R_alphas = [None] * len(cache.blocks)
    needed = ("x", "v", "merged", "attn_out", "h1", "ffn_act", "ffn_out", "resid2")
    for l in range(len(cache.blocks) - 1, -1, -1):
        blk = cache.blocks[l]
        missing = [k for k in needed if k not in blk]
        if missing:
            raise ValueError(f"layer {l}: cache lacks {missing}")
        pre = f"L{l}_"
        # LN2 bypass, then residual split around the feed-forward block
        R_h1, R_f = lrp_residual(blk["h1"], blk["ffn_out"], Rx, eps)
        R_act = lrp_linear(blk["ffn_act"], P[pre + "W2"], P[pre + "b2"], R_f, eps)
        R_h1 = R_h1 + lrp_linear(blk["h1"], P[pre + "W1"], P[pre + "b1"], R_act, eps)
        totals.append(float(R_h1.sum()))
        # LN1 bypass, residual split around attention
        R_x, R_ao = lrp_residual(blk["x"], blk["attn_out"], R_h1, eps)
        R_merged = lrp_linear(blk["merged"], P[pre + "Wo"], P[pre + "bo"], R_ao, eps)
        R_ctx = R_merged.reshape(1, Tn, H, dh).transpose(0, 2, 1, 3)
        alpha = cache.attention[l].alpha.value
        R_alpha, R_v = lrp_mix(alpha, blk["v"], R_ctx, eps)
        R_alphas[l] = R_alpha[0]
        R_vflat = R_v.transpose(0, 2, 1, 3).reshape(1, Tn, E)
        R_x = R_x + lrp_linear(blk["x"], P[pre + "Wv"], P[pre + "bv"], R_vflat, eps)
        Rx = R_x
        totals.append(float(Rx.sum()))
    return RelevanceMap(logit, R_alphas, Rx[0], totals, meta)


# ------------------------------------------------------- transformer methods

def _require_transformer(trace, name):
    if not _is_transformer(trace):
        raise ValueError(f"{name} is defined for transformer models only")


def plrp(trace: AttentionTrace, relevance: RelevanceMap | None = None) -> Explanation:
    _require_transformer(trace, "PLRP")
    rel = relevance or propagate_relevance(trace)
    w = rel.alpha[-1][:, 0, 1:].mean(axis=0)
    return Explanation("PLRP", trace.predicted, w, {"heads": "mean", "layer": "last"})


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / m.sum(axis=-1, keepdims=True)


def rollout(trace: AttentionTrace) -> Explanation:
    _require_transformer(trace, "Rollout")
    joint = None
    for a in trace.alphas:
        n = a.shape[-1]
        hat = _normalize_rows(0.5 * a.mean(axis=0) + 0.5 * np.eye(n))
        joint = hat if joint is None else hat @ joint
    return Explanation("Rollout", trace.predicted, joint[0, 1:], {"residual": 0.5})


def trans_att(trace: AttentionTrace, relevance: RelevanceMap | None = None,
              score: str = "logit") -> Explanation:
    _require_transformer(trace, "TransAtt")
    rel = relevance or propagate_relevance(trace)
    grads = grad_wrt(trace, "alpha", score)
    joint = None
    for g, r in zip(grads, rel.alpha):
        cam = np.maximum(g * r, 0.0).mean(axis=0)
        hat = _normalize_rows(np.eye(cam.shape[-1]) + cam)
        joint = hat if joint is None else hat @ joint
    return Explanation("TransAtt", trace.predicted, joint[0, 1:],
                       {"aggregation": "normalized identity-added product", "score": score})


def gen_att(trace: AttentionTrace, score: str = "logit") -> Explanation:
    _require_transformer(trace, "GenAtt")
    grads = grad_wrt(trace, "alpha", score)
    joint = None
    for a, g in zip(trace.alphas, grads):
        cam = np.maximum(a * g, 0.0).mean(axis=0)
        if joint is None:
            joint = np.eye(cam.shape[-1])
        joint = joint + cam @ joint
    return Explanation("GenAtt", trace.predicted, joint[0, 1:],
                       {"aggregation": "R += cam @ R", "score": score})


# ---------------------------------------------------------------- registry

GENERAL_METHODS = ("Random", "RawAtt", "AttGrad", "AttIN", "InputGrad", "IG")
TRANSFORMER_METHODS = GENERAL_METHODS + ("PLRP", "Rollout", "TransAtt", "GenAtt")
ABLATIONS = ("RawAtt", "AttGrad", "AttGradAbs", "AttGradSign")
ALL_METHODS = TRANSFORMER_METHODS + ("AttGradAbs", "AttGradSign")


def methods_for(model: AttentionModel) -> tuple[str, ...]:
    return TRANSFORMER_METHODS if model.spec.is_transformer else GENERAL_METHODS


def explain(method: str, model: AttentionModel, ids, trace: AttentionTrace | None = None,
            seed: int = 0, ig_steps: int = 128, ig_baseline="mask",
            score: str = "logit") -> Explanation:
    """Compute one method; pass a shared ``trace`` to reuse its gradients."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if method not in ALL_METHODS:
        raise ValueError(f"unknown explanation method {method!r}")
    if method == "Random":
        tr = trace or predict_traced(model, ids)
        return random_explanation(len(ids), seed, tr.predicted)
    if method == "IG":
        return integrated_gradients(model, ids, ig_baseline, ig_steps, score=score)
    trace = trace or predict_traced(model, ids)
    if method == "RawAtt":
        return raw_att(trace)
    if method == "AttGrad":
        return att_grad(trace, score)
    if method == "AttGradAbs":
        return att_grad_ablation(trace, "abs", score)
    if method == "AttGradSign":
        return att_grad_ablation(trace, "sign", score)
    if method == "AttIN":
        return att_input_norm(trace)
    if method == "InputGrad":
        return input_grad(trace, score)
    if method == "PLRP":
        return plrp(trace)
    if method == "Rollout":
        return rollout(trace)
    if method == "TransAtt":
        return trans_att(trace, score=score)
    return gen_att(trace, score)


def write_jsonl(records, path) -> None:
    """``records`` yields ``(example_id, Explanation)`` pairs."""
    with open(path, "w", encoding="utf-8") as fh:
        for uid, exp in records:
            fh.write(json.dumps({"example_id": uid, "method": exp.method, "target": exp.target,
                                 "weights": exp.weights.tolist()}) + "\n")
