"""Model zoo, trainer, traced prediction and checkpoint I/O."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import layers
from . import tensor as T
from .data import MASK, PAD, Corpus
from .tensor import Tensor

log = logging.getLogger(__name__)

ENCODERS = ("lstm", "cnn", "transformer", "bag")
ATTENTIONS = ("tanh", "dot", "multi-head", "none")

ZOO = {
    "lstm+tanh": ("lstm", "tanh"),
    "lstm+dot": ("lstm", "dot"),
    "cnn+tanh": ("cnn", "tanh"),
    "cnn+dot": ("cnn", "dot"),
    "transformer": ("transformer", "multi-head"),
}
GENERAL_MODELS = ("lstm+tanh", "lstm+dot", "cnn+tanh", "cnn+dot")


@dataclass
class ModelSpec:
    encoder: str = "lstm"
    attention: str = "tanh"
    num_classes: int = 2
    vocab_size: int = 100
    embed_dim: int = 64
    hidden_dim: int = 64
    att_dim: int = 64
    kernel_width: int = 3
    layers: int = 2
    heads: int = 2
    max_len: int = 64
    head_depth: int = 1
    head_activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.attention not in ATTENTIONS:
            raise ValueError(f"unknown attention {self.attention!r}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.encoder == "transformer" and self.attention != "multi-head":
            raise ValueError("transformer encoder requires multi-head attention")
        if self.encoder in ("lstm", "cnn") and self.attention not in ("tanh", "dot"):
            raise ValueError(f"{self.encoder} encoder takes tanh or dot attention")
        if self.encoder != "bag" and self.head_depth < 1:
            raise ValueError("head_depth must be >= 1")
        if self.encoder == "transformer" and (self.layers < 1 or self.embed_dim % self.heads):
            raise ValueError("transformer needs >= 1 layer and embed_dim divisible by heads")

    @classmethod
    def from_zoo(cls, name: str, **kw) -> "ModelSpec":
        encoder, attention = ZOO[name]
        return cls(encoder=encoder, attention=attention, **kw)

    @property
    def name(self) -> str:
        if self.encoder == "transformer":
            return "transformer"
        if self.encoder == "bag":
            return "bag"
        return f"{self.encoder}+{self.attention}"

    @property
    def is_transformer(self) -> bool:
        return self.encoder == "transformer"


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 3
    accuracy_floor: float = 0.85
    clip_norm: float = 5.0


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became NaN in epoch {epoch}")
        self.epoch = epoch


def _glorot(rng, fan_in, fan_out, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def init_params(spec: ModelSpec) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(spec.seed)
    E, H, A = spec.embed_dim, spec.hidden_dim, spec.att_dim
    p: dict[str, np.ndarray] = {}
    emb = rng.normal(0.0, 0.1, size=(spec.vocab_size, E))
    emb[PAD] = 0.0
    p["emb"] = emb
    if spec.encoder == "lstm":
        p["lstm_Wx"] = _glorot(rng, E, 4 * H)
        p["lstm_Wh"] = _glorot(rng, H, 4 * H)
        b = np.zeros(4 * H)
        b[H:2 * H] = 1.0
        p["lstm_b"] = b
        ctx_dim = H
    elif spec.encoder == "cnn":
        K = spec.kernel_width
        p["cnn_W"] = _glorot(rng, K * E, H, (K, E, H))
        p["cnn_b"] = np.zeros(H)
        ctx_dim = H
    elif spec.encoder == "transformer":
        p["pos"] = rng.normal(0.0, 0.1, size=(spec.max_len + 1, E))
        p["cls"] = rng.normal(0.0, 0.1, size=E)
        F = 2 * E
        for l in range(spec.layers):
            pre = f"L{l}_"
            for name in ("Wq", "Wk", "Wv", "Wo"):
                p[pre + name] = _glorot(rng, E, E)
            for name in ("bq", "bk", "bv", "bo"):
                p[pre + name] = np.zeros(E)
            p[pre + "W1"] = _glorot(rng, E, F)
            p[pre + "b1"] = np.zeros(F)
            p[pre + "W2"] = _glorot(rng, F, E)
            p[pre + "b2"] = np.zeros(E)
            for ln in ("ln1", "ln2"):
                p[pre + ln + "_g"] = np.ones(E)
                p[pre + ln + "_b"] = np.zeros(E)
        ctx_dim = E
    else:
        ctx_dim = E
    if spec.attention == "tanh":
        p["att_w1"] = rng.uniform(-np.sqrt(3.0 / A), np.sqrt(3.0 / A), size=A)
        p["att_W2"] = _glorot(rng, ctx_dim, A)
        p["att_W3"] = _glorot(rng, ctx_dim, A)
    width = ctx_dim
    for i in range(spec.head_depth):
        p[f"head{i}_W"] = _glorot(rng, width, H)
        p[f"head{i}_b"] = np.zeros(H)
        width = H
    p["out_W"] = _glorot(rng, width, spec.num_classes)
    p["out_b"] = np.zeros(spec.num_classes)
    return p


class AttentionModel:
    """A classifier ``f`` mapping a token id sequence to class logits.

    ``forward`` is batched over rows of equal length.  ``keep`` masks keys in
    every attention module (the attention-mask replacement); ``emb`` lets the
    caller feed embeddings directly, which is how gradients w.r.t. the input
    vectors are taken.
    """

    def __init__(self, spec: ModelSpec, params: dict[str, np.ndarray] | None = None,
                 vocab: list[str] | None = None, metadata: dict | None = None):
        self.spec = spec
        self.params = params if params is not None else init_params(spec)
        self.vocab = vocab
        self.metadata = metadata or {}

    # ------------------------------------------------------------------ forward
    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def embed(self, ids: np.ndarray) -> np.ndarray:
        return self.params["emb"][np.asarray(ids)]

    def forward(self, ids, *, emb: Tensor | None = None, keep=None, renormalize=False,
                params: dict[str, Tensor] | None = None,
                cache: layers.LayerActivationCache | None = None) -> Tensor:
        spec = self.spec
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None]
        B, N = ids.shape
        if N == 0:
            raise ValueError("empty example")
        P = params if params is not None else self.constants()
        if emb is None:
            emb = T.embedding(P["emb"], ids)
        if keep is not None:
            keep = np.broadcast_to(np.asarray(keep, dtype=bool), (B, N))

        if spec.encoder == "transformer":
            if N > spec.max_len:
                raise ValueError(f"sequence length {N} exceeds max_len {spec.max_len}")
            E = spec.embed_dim
            pos = T.take_slice(P["pos"], slice(0, N + 1))
            cls = T.reshape(T.add(T.take_slice(P["cls"], slice(None)),
                                  T.take_slice(pos, 0)), (1, 1, E))
            tok = T.add(emb, T.broadcast(T.take_slice(pos, slice(1, N + 1)), (B, N, E)))
            x = T.concat([T.broadcast(cls, (B, 1, E)), tok], axis=1)
            kmask = None
            if keep is not None:
                kmask = np.concatenate([np.ones((B, 1), dtype=bool), keep], axis=1)
            for l in range(spec.layers):
                pre = f"L{l}_"
                x = layers.multi_head_self_attention(P, x, spec.heads, pre, keep=kmask,
                                                     renormalize=renormalize, cache=cache)
                x = layers.feed_forward(P, x, pre, cache=cache)
            pooled = T.reshape(T.take_slice(x, (slice(None), 0)), (B, E))
        elif spec.encoder == "bag":
            w = np.ones((B, N, spec.embed_dim)) if keep is None else np.repeat(
                keep[:, :, None].astype(float), spec.embed_dim, axis=2)
            pooled = T.sum(T.mul(emb, Tensor(w)), axis=1)
        else:
            if spec.encoder == "lstm":
                keys, query = layers.lstm_encode(P, emb)
            else:
                keys, query = layers.cnn_encode(P, emb, keep=keep)
            if spec.attention == "tanh":
                _, pooled = layers.tanh_attention(P, query, keys, keep=keep,
                                                  renormalize=renormalize, cache=cache)
            else:
                _, pooled = layers.dot_attention(query, keys, keys, 1.0 / np.sqrt(keys.shape[2]),
                                                 keep=keep, renormalize=renormalize, cache=cache)
        return layers.classifier_head(P, pooled, spec.head_depth, spec.head_activation, cache)

    def logits(self, ids, keep=None, renormalize=False) -> np.ndarray:
        return self.forward(ids, keep=keep, renormalize=renormalize).value

    def probabilities(self, ids, keep=None, renormalize=False) -> np.ndarray:
        return T.softmax_array(self.logits(ids, keep, renormalize), axis=-1)


TrainedModel = AttentionModel


# ---------------------------------------------------------------- training

def _batches(corpus: Corpus, batch_size: int, rng) -> list[np.ndarray]:
    """Index batches of equal-length examples, in shuffled order."""
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(corpus.examples):
        by_len.setdefault(len(ex.ids), []).append(i)
    out = []
    for n in sorted(by_len):
        idx = np.array(by_len[n])
        idx = idx[rng.permutation(len(idx))]
        out.extend(idx[s:s + batch_size] for s in range(0, len(idx), batch_size))
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def predict_labels(model: AttentionModel, corpus: Corpus, batch_size: int = 256) -> np.ndarray:
    preds = np.zeros(len(corpus), dtype=np.int64)
    by_len: dict[int, list[int]] = {}
    for i, ex in enumerate(corpus.examples):
        by_len.setdefault(len(ex.ids), []).append(i)
    for n, idx in by_len.items():
        for s in range(0, len(idx), batch_size):
            chunk = idx[s:s + batch_size]
            ids = np.stack([corpus.examples[i].ids for i in chunk])
            preds[chunk] = np.argmax(model.logits(ids), axis=-1)
    return preds


def accuracy(model: AttentionModel, corpus: Corpus) -> float:
    if len(corpus) == 0:
        return float("nan")
    labels = np.array([ex.label for ex in corpus.examples])
    return float(np.mean(predict_labels(model, corpus) == labels))


def train(corpus: Corpus, spec: ModelSpec, hyper: TrainConfig | None = None,
          val: Corpus | None = None) -> AttentionModel:
    """Adam on cross-entropy with early stopping on validation accuracy.

    Deterministic given ``spec.seed``.  Returns the best-validation
    parameters; ``metadata["below_floor"]`` flags a missed accuracy floor.
    """
    hyper = hyper or TrainConfig()
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    labels = [ex.label for ex in corpus.examples]
    if min(labels) < 0 or max(labels) >= spec.num_classes:
        raise ValueError(f"labels outside [0, {spec.num_classes})")
    model = AttentionModel(spec, vocab=corpus.vocab)
    rng = np.random.default_rng(spec.seed + 7919)
    names = sorted(model.params)
    m = {k: np.zeros_like(model.params[k]) for k in names}
    v = {k: np.zeros_like(model.params[k]) for k in names}
    b1, b2, eps = 0.9, 0.999, 1e-8
    step = 0
    val_set = val if val is not None and len(val) else corpus
    best_acc, best_params, bad = -1.0, None, 0
    history = []
    epoch = 0
    for epoch in range(1, hyper.epochs + 1):
        total, count = 0.0, 0
        for idx in _batches(corpus, hyper.batch_size, rng):
            ids = np.stack([corpus.examples[i].ids for i in idx])
            y = np.array([corpus.examples[i].label for i in idx])
            tape = T.Tape()
            P = {k: tape.leaf(model.params[k]) for k in names}
            logits = model.forward(ids, params=P)
            onehot = np.zeros(logits.shape)
            onehot[np.arange(len(y)), y] = 1.0
            loss = T.scale(T.sum(T.mul(T.log_softmax(logits, -1), Tensor(onehot))), -1.0 / len(y))
            if not np.isfinite(loss.value):
                raise TrainingDiverged(epoch)
            tape.backward(loss)
            grads = {k: tape.grad(P[k]) for k in names}
            gnorm = np.sqrt(np.sum([np.sum(g * g) for g in grads.values()]))
            if gnorm > hyper.clip_norm:
                grads = {k: g * (hyper.clip_norm / gnorm) for k, g in grads.items()}
            step += 1
            for k in names:
                g = grads[k]
                m[k] = b1 * m[k] + (1 - b1) * g
                v[k] = b2 * v[k] + (1 - b2) * g * g
                mh = m[k] / (1 - b1 ** step)
                vh = v[k] / (1 - b2 ** step)
                model.params[k] = model.params[k] - hyper.lr * mh / (np.sqrt(vh) + eps)
            model.params["emb"][PAD] = 0.0
            total += float(loss.value) * len(y)
            count += len(y)
        acc = accuracy(model, val_set)
        history.append({"epoch": epoch, "loss": total / count, "val_accuracy": acc})
        log.debug("%s epoch %d loss %.4f val acc %.4f", spec.name, epoch, total / count, acc)
        if acc > best_acc:
            best_acc, bad = acc, 0
            best_params = {k: a.copy() for k, a in model.params.items()}
        else:
            bad += 1
            if bad >= hyper.patience:
                break
    model.params = best_params
    train_acc = accuracy(model, corpus)
    model.metadata = {
        "epochs": epoch,
        "seed": spec.seed,
        "train_accuracy": train_acc,
        "val_accuracy": best_acc,
        "history": history,
        "below_floor": bool(train_acc < hyper.accuracy_floor),
    }
    if model.metadata["below_floor"]:
        warnings.warn(f"{spec.name} seed {spec.seed}: training accuracy {train_acc:.3f} "
                      f"below floor {hyper.accuracy_floor}")
    return model


# --------------------------------------------------------------- tracing

@dataclass
class AttentionTrace:
    ids: np.ndarray
    cache: layers.LayerActivationCache
    logits: np.ndarray
    confidence: np.ndarray
    predicted: int
    tape: T.Tape = field(repr=False)
    embeddings: Tensor = field(repr=False)
    logit_tensor: Tensor = field(repr=False)
    model: AttentionModel = field(repr=False)
    _grads: dict | None = field(default=None, repr=False)

    @property
    def alphas(self) -> list[np.ndarray]:
        return [rec.alpha.value[0] for rec in self.cache.attention]


def predict_traced(model: AttentionModel, ids) -> AttentionTrace:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size == 0:
        raise ValueError("empty example")
    tape = T.Tape()
    emb = tape.leaf(model.embed(ids[None]))
    cache = layers.LayerActivationCache()
    logits = model.forward(ids[None], emb=emb, cache=cache)
    conf = T.softmax_array(logits.value[0])
    return AttentionTrace(ids=ids, cache=cache, logits=logits.value[0].copy(), confidence=conf,
                          predicted=int(np.argmax(conf)), tape=tape, embeddings=emb,
                          logit_tensor=logits, model=model)


def grad_wrt(trace: AttentionTrace, target: str = "alpha", score: str = "logit"):
    """Gradient of the predicted class's score w.r.t. every attention matrix
    (``target="alpha"``, a list aligned with ``trace.cache.attention``) or
    the input embeddings (``"embeddings"``, shape ``(N, D)``).

    The first call runs the backward pass; later calls with the same score
    read the stored result.
    """
    if trace._grads is None or trace._grads["score"] != score:
        if trace.tape.consumed:
            raise RuntimeError("tape already consumed")
        out = trace.logit_tensor
        if score == "prob":
            out = T.softmax(out, axis=-1)
        elif score != "logit":
            raise ValueError(f"unknown score {score!r}")
        onehot = np.zeros(out.shape)
        onehot[0, trace.predicted] = 1.0
        root = T.sum(T.mul(out, Tensor(onehot)))
        trace.tape.backward(root)
        trace._grads = {
            "score": score,
            "alpha": [trace.tape.grad(rec.alpha)[0] for rec in trace.cache.attention],
            "embeddings": trace.tape.grad(trace.embeddings)[0],
        }
    if target not in ("alpha", "embeddings"):
        raise ValueError(f"unknown gradient target {target!r}")
    return trace._grads[target]


# ------------------------------------------------------------- checkpoints

_MAGIC = b"POLARCHECK-CKPT 1\n"


def save_checkpoint(model: AttentionModel, path) -> None:
    """Header line of JSON (spec, vocab, metadata, array manifest) followed by
    raw little-endian float64 parameter data."""
    names = sorted(model.params)
    manifest, offset = [], 0
    for k in names:
        a = model.params[k]
        manifest.append({"name": k, "shape": list(a.shape), "offset": offset})
        offset += a.size
    header = {"spec": asdict(model.spec), "vocab": model.vocab,
              "metadata": model.metadata, "arrays": manifest}
    blob = json.dumps(header, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(blob + b"\n")
        for k in names:
            fh.write(np.ascontiguousarray(model.params[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> AttentionModel:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    end = raw.index(b"\n", len(_MAGIC))
    header = json.loads(raw[len(_MAGIC):end])
    data = np.frombuffer(raw[end + 1:], dtype="<f8")
    params = {}
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        params[entry["name"]] = data[entry["offset"]:entry["offset"] + n].reshape(entry["shape"]).astype(np.float64)
    return AttentionModel(ModelSpec(**header["spec"]), params, header["vocab"], header["metadata"])


def linear_softmax_model(weights: np.ndarray, embeddings: np.ndarray,
                         vocab: list[str] | None = None) -> AttentionModel:
    """Hand-built oracle: logits = W^T sum_i x_i, no attention, no hidden layer.

    ``weights`` is ``(D, C)``; the MASK row of ``embeddings`` should be zero
    for closed-form perturbation checks.
    """
    V, D = embeddings.shape
    C = weights.shape[1]
    spec = ModelSpec(encoder="bag", attention="none", num_classes=C, vocab_size=V,
                     embed_dim=D, hidden_dim=D, head_depth=0)
    params = {"emb": np.array(embeddings, dtype=float), "out_W": np.array(weights, dtype=float),
              "out_b": np.zeros(C)}
    return AttentionModel(spec, params, vocab)


__all__ = [
    "ModelSpec", "TrainConfig", "AttentionModel", "TrainedModel", "AttentionTrace",
    "train", "predict_traced", "grad_wrt", "save_checkpoint", "load_checkpoint",
    "linear_softmax_model", "accuracy", "ZOO", "GENERAL_MODELS", "MASK",
]
