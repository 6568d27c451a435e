"""Encoders and attention blocks that record their internals as they run.

Every function takes a ``params`` mapping of name -> Tensor, so the same code
serves training (parameters are tape leaves), traced prediction (parameters
are constants, activations are recorded) and plain numpy inference (no tape).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LN_EPS = 1e-5


@dataclass
class AttentionRecord:
    """One attention module's forward state.

    ``alpha`` has shape ``(B, Tk)`` for single-query attention and
    ``(B, H, Tq, Tk)`` for self-attention.  ``values`` are the vectors the
    weights mix, ``(B, Tk, dv)`` or ``(B, H, Tk, dh)``.
    """

    kind: str
    alpha: Tensor
    values: np.ndarray
    scores: np.ndarray

    @property
    def value_norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=-1)


@dataclass
class LayerActivationCache:
    attention: list[AttentionRecord] = field(default_factory=list)
    # per transformer layer: arrays needed to propagate relevance
    blocks: list[dict] = field(default_factory=list)
    # classifier head: list of (input, weight, bias, pre-activation, activation name)
    head: list[tuple] = field(default_factory=list)
    # general models: keys mixed into the context vector, (B, T, H)
    keys: np.ndarray | None = None
    context: np.ndarray | None = None


def key_mask(alpha: Tensor, keep: np.ndarray | None, renormalize: bool) -> Tensor:
    """Zero attention on removed keys.  ``keep`` is ``(B, Tk)`` booleans."""
    if keep is None:
        return alpha
    keep = np.asarray(keep, dtype=T.DTYPE)
    if alpha.value.ndim == 4:
        keep = keep[:, None, None, :]
    full = np.broadcast_to(keep, alpha.shape).copy()
    masked = T.mul(alpha, Tensor(full))
    if renormalize:
        denom = T.broadcast(T.sum(masked, axis=-1, keepdims=True), alpha.shape)
        masked = T.div(masked, denom)
    return masked


def tanh_attention(params, query: Tensor, keys: Tensor, *, keep=None,
                   renormalize=False, cache: LayerActivationCache | None = None):
    """Additive attention, ``alpha = softmax(w1 . tanh(W2 k_i + W3 q))``.

    ``query`` is ``(B, dq)``, ``keys`` ``(B, N, dk)``.  Parameters: ``att_w1``
    ``(da,)``, ``att_W2`` ``(dk, da)``, ``att_W3`` ``(dq, da)`` (stored
    transposed so activations multiply from the left).
    """
    if keys.value.ndim != 3 or keys.shape[1] == 0:
        raise ShapeError(f"tanh_attention: need non-empty keys (B, N, d), got {keys.shape}")
    B, N, _ = keys.shape
    w1, W2, W3 = params["att_w1"], params["att_W2"], params["att_W3"]
    if keys.shape[2] != W2.shape[0] or query.shape[-1] != W3.shape[0]:
        raise ShapeError(
            f"tanh_attention: keys {keys.shape} / query {query.shape} do not match "
            f"W2 {W2.shape} / W3 {W3.shape}"
        )
    kproj = T.matmul(keys, W2)
    qproj = T.reshape(T.matmul(query, W3), (B, 1, W3.shape[1]))
    hidden = T.tanh(T.add(kproj, T.broadcast(qproj, kproj.shape)))
    scores = T.matmul(hidden, w1)
    alpha = key_mask(T.softmax(scores, axis=-1), keep, renormalize)
    context = T.reshape(T.matmul(T.reshape(alpha, (B, 1, N)), keys), (B, keys.shape[2]))
    if cache is not None:
        cache.attention.append(AttentionRecord("tanh", alpha, keys.value, scores.value))
        cache.keys, cache.context = keys.value, context.value
    return alpha, context


def dot_attention(query: Tensor, keys: Tensor, values: Tensor, scale: float, *,
                  keep=None, renormalize=False, cache: LayerActivationCache | None = None):
    """Scaled dot-product attention for a single query per batch row."""
    if keys.value.ndim != 3 or query.value.ndim != 2 or keys.shape[2] != query.shape[1]:
        raise ShapeError(f"dot_attention: query {query.shape} incompatible with keys {keys.shape}")
    if values.shape[:2] != keys.shape[:2]:
        raise ShapeError(f"dot_attention: values {values.shape} do not align with keys {keys.shape}")
    B, N, _ = keys.shape
    scores = T.scale(T.reshape(T.matmul(keys, T.reshape(query, (B, query.shape[1], 1))), (B, N)), scale)
    alpha = key_mask(T.softmax(scores, axis=-1), keep, renormalize)
    context = T.reshape(T.matmul(T.reshape(alpha, (B, 1, N)), values), (B, values.shape[2]))
    if cache is not None:
        cache.attention.append(AttentionRecord("dot", alpha, values.value, scores.value))
        cache.keys, cache.context = values.value, context.value
    return alpha, context


def multi_head_self_attention(params, x: Tensor, heads: int, prefix: str = "", *,
                              keep=None, renormalize=False,
                              cache: LayerActivationCache | None = None) -> Tensor:
    """Post-norm self-attention sublayer: ``LN(x + MHA(x))``.

    ``keep`` masks keys in ``(B, T)``; the output keeps the input shape.
    """
    B, L, D = x.shape
    if L < 1:
        raise ShapeError("multi_head_self_attention: empty sequence")
    if D % heads:
        raise ShapeError(f"model width {D} not divisible by {heads} heads")
    dh = D // heads
    p = lambda name: params[prefix + name]  # noqa: E731

    def split(t):
        return T.transpose(T.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(T.linear(x, p("Wq"), p("bq")))
    k = split(T.linear(x, p("Wk"), p("bk")))
    v = split(T.linear(x, p("Wv"), p("bv")))
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    alpha = key_mask(T.softmax(scores, axis=-1), keep, renormalize)
    ctx = T.matmul(alpha, v)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, D))
    attn_out = T.linear(merged, p("Wo"), p("bo"))
    resid = T.add(x, attn_out)
    out = T.layer_norm(resid, p("ln1_g"), p("ln1_b"), LN_EPS)
    if cache is not None:
        cache.attention.append(AttentionRecord("self", alpha, v.value, scores.value))
        cache.blocks.append({
            "x": x.value, "v": v.value, "ctx": ctx.value, "merged": merged.value,
            "attn_out": attn_out.value, "resid1": resid.value, "h1": out.value,
        })
    return out


def feed_forward(params, x: Tensor, prefix: str = "",
                 cache: LayerActivationCache | None = None) -> Tensor:
    p = lambda name: params[prefix + name]  # noqa: E731
    pre = T.linear(x, p("W1"), p("b1"))
    act = T.relu(pre)
    f = T.linear(act, p("W2"), p("b2"))
    resid = T.add(x, f)
    out = T.layer_norm(resid, p("ln2_g"), p("ln2_b"), LN_EPS)
    if cache is not None and cache.blocks:
        cache.blocks[-1].update({"ffn_pre": pre.value, "ffn_act": act.value,
                                 "ffn_out": f.value, "resid2": resid.value, "h2": out.value})
    return out


def lstm_encode(params, emb: Tensor):
    """Single-layer LSTM over ``(B, N, D)``; returns all hidden states
    ``(B, N, H)`` and the final state ``(B, H)``.

    Gate order in the fused weights is input, forget, cell, output.
    """
    if emb.value.ndim != 3 or emb.shape[1] == 0:
        raise ShapeError(f"lstm_encode: need a non-empty (B, N, D) sequence, got {emb.shape}")
    B, N, _ = emb.shape
    Wx, Wh, b = params["lstm_Wx"], params["lstm_Wh"], params["lstm_b"]
    H = Wh.shape[0]
    xw = T.linear(emb, Wx, b)  # B, N, 4H
    h = Tensor(np.zeros((B, H)))
    c = Tensor(np.zeros((B, H)))
    states = []
    for t in range(N):
        gates = T.add(T.take_slice(xw, (slice(None), t)), T.matmul(h, Wh))
        i = T.sigmoid(T.take_slice(gates, (slice(None), slice(0, H))))
        f = T.sigmoid(T.take_slice(gates, (slice(None), slice(H, 2 * H))))
        g = T.tanh(T.take_slice(gates, (slice(None), slice(2 * H, 3 * H))))
        o = T.sigmoid(T.take_slice(gates, (slice(None), slice(3 * H, 4 * H))))
        c = T.add(T.mul(f, c), T.mul(i, g))
        h = T.mul(o, T.tanh(c))
        states.append(T.reshape(h, (B, 1, H)))
    hs = states[0] if N == 1 else T.concat(states, axis=1)
    return hs, h


def cnn_encode(params, emb: Tensor, padding: str = "same", keep: np.ndarray | None = None):
    """Relu 1-d convolution over ``(B, N, D)``.

    With ``padding="same"`` (odd kernel widths) the output keeps one feature
    vector per token; ``"valid"`` rejects sequences shorter than the kernel.
    Returns per-position features ``(B, N', F)`` and their mean ``(B, F)``.
    The mean is a uniform attention over positions, so ``keep`` (``(B, N)``,
    same padding only) drops removed positions from it.
    """
    W, b = params["cnn_W"], params["cnn_b"]
    K = W.shape[0]
    if emb.value.ndim != 3 or emb.shape[1] == 0:
        raise ShapeError(f"cnn_encode: need a non-empty (B, N, D) sequence, got {emb.shape}")
    B, N, D = emb.shape
    if padding == "same":
        if K % 2 == 0:
            raise ShapeError("same padding needs an odd kernel width")
        pad = K // 2
        if pad:
            z = Tensor(np.zeros((B, pad, D)))
            emb = T.concat([z, emb, z], axis=1)
    elif padding == "valid":
        if N < K:
            raise ShapeError(f"cnn_encode: sequence length {N} shorter than kernel width {K}")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    conv = T.conv1d(emb, W)
    feats = T.relu(T.add(conv, T.broadcast(b, conv.shape)))
    if keep is None or np.all(keep):
        return feats, T.mean(feats, axis=1)
    if padding != "same":
        raise ValueError("masked pooling needs same padding")
    k = np.asarray(keep, dtype=T.DTYPE)
    w = k / k.sum(axis=1, keepdims=True)
    weights = Tensor(np.repeat(w[:, :, None], feats.shape[2], axis=2))
    return feats, T.sum(T.mul(feats, weights), axis=1)


def classifier_head(params, h: Tensor, depth: int, activation: str = "tanh",
                    cache: LayerActivationCache | None = None) -> Tensor:
    """``depth`` stacked nonlinear layers followed by the output projection."""
    act = {"tanh": T.tanh, "relu": T.relu}[activation]
    for i in range(depth):
        W, b = params[f"head{i}_W"], params[f"head{i}_b"]
        pre = T.linear(h, W, b)
        if cache is not None:
            cache.head.append((h.value, W.value, b.value, pre.value, activation))
        h = act(pre)
    W, b = params["out_W"], params["out_b"]
    logits = T.linear(h, W, b)
    if cache is not None:
        cache.head.append((h.value, W.value, b.value, logits.value, None))
    return logits
