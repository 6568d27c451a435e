"""Token removal under the three replacement functions, and the confidence
change it causes on the originally predicted class."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import MASK
from .models import AttentionModel

SLICE_OUT = "slice-out"
ATTENTION_MASK = "attention-mask"
MASK_TOKEN = "mask-token"
STRATEGY_KINDS = (SLICE_OUT, ATTENTION_MASK, MASK_TOKEN)


@dataclass(frozen=True)
class ReplacementStrategy:
    kind: str
    renormalize: bool = False

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown replacement strategy {self.kind!r}")

    @property
    def name(self) -> str:
        return self.kind + ("+renorm" if self.renormalize else "")

    @classmethod
    def parse(cls, name: str) -> "ReplacementStrategy":
        if name.endswith("+renorm"):
            return cls(name[: -len("+renorm")], True)
        return cls(name)


DEFAULT_STRATEGIES = tuple(ReplacementStrategy(k) for k in STRATEGY_KINDS)


@dataclass
class PerturbedInput:
    ids: np.ndarray
    keep: np.ndarray | None
    renormalize: bool


@dataclass
class PerturbationOutcome:
    removed: tuple[int, ...]
    strategy: str
    original: float
    perturbed: float
    delta: float
    predicted: int


def _check_indices(n: int, indices) -> np.ndarray:
    idx = np.unique(np.asarray(list(indices), dtype=np.int64))
    if idx.size == 0:
        raise ValueError("no tokens to remove")
    if idx.min() < 0 or idx.max() >= n:
        raise ValueError(f"removal index out of range for {n} tokens")
    if idx.size >= n:
        raise ValueError("removing every token leaves a degenerate input")
    return idx


def remove_tokens(ids, indices, strategy: ReplacementStrategy) -> PerturbedInput:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    idx = _check_indices(len(ids), indices)
    if strategy.kind == SLICE_OUT:
        return PerturbedInput(np.delete(ids, idx), None, False)
    if strategy.kind == ATTENTION_MASK:
        keep = np.ones(len(ids), dtype=bool)
        keep[idx] = False
        return PerturbedInput(ids.copy(), keep, strategy.renormalize)
    out = ids.copy()
    out[idx] = MASK
    return PerturbedInput(out, None, False)


def batch_probabilities(model: AttentionModel, ids, removal_sets,
                        strategy: ReplacementStrategy) -> np.ndarray:
    """Class probabilities ``(R, C)`` after each removal set.  Inputs of equal
    length share one batched forward pass."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    items = [remove_tokens(ids, s, strategy) for s in removal_sets]
    out = np.zeros((len(items), model.spec.num_classes))
    groups: dict[int, list[int]] = {}
    for i, it in enumerate(items):
        groups.setdefault(len(it.ids), []).append(i)
    for _, members in sorted(groups.items()):
        batch = np.stack([items[i].ids for i in members])
        keep = None
        if strategy.kind == ATTENTION_MASK:
            keep = np.stack([items[i].keep for i in members])
        out[members] = model.probabilities(batch, keep=keep, renormalize=strategy.renormalize)
    return out


def delta_confidence(model: AttentionModel, ids, indices, strategy: ReplacementStrategy,
                     predicted: int | None = None) -> PerturbationOutcome:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    base = model.probabilities(ids[None])[0]
    yhat = int(np.argmax(base)) if predicted is None else predicted
    pert = batch_probabilities(model, ids, [indices], strategy)[0]
    return PerturbationOutcome(tuple(int(i) for i in np.unique(list(indices))), strategy.name,
                               float(base[yhat]), float(pert[yhat]),
                               float(base[yhat] - pert[yhat]), yhat)


def rank_by_magnitude(weights) -> np.ndarray:
    """Token indices by descending |weight|; equal magnitudes keep index order."""
    w = np.abs(np.asarray(weights, dtype=np.float64))
    return np.argsort(-w, kind="stable")


def top_count(n: int, fraction: float) -> int:
    return max(1, int(np.floor(fraction * n + 1e-9)))


def top_fraction_indices(weights, fraction: float, mode: str = "remove-top") -> np.ndarray:
    """Indices to remove: the top ``fraction`` by |weight| (``remove-top``)
    or everything except them (``keep-top``)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    order = rank_by_magnitude(weights)
    k = top_count(len(order), fraction)
    if mode == "remove-top":
        return np.sort(order[:k])
    if mode == "keep-top":
        return np.sort(order[k:])
    raise ValueError(f"unknown mode {mode!r}")
