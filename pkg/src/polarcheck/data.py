"""Corpora: file loading, vocabulary, splits and a synthetic generator whose
tokens carry known impact polarity."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

PAD, UNK, MASK = 0, 1, 2
RESERVED = ["<pad>", "<unk>", "<mask>"]
MAX_TOKENS = 64


@dataclass
class Example:
    ids: np.ndarray
    label: int
    polarity: np.ndarray | None = None
    uid: str = ""

    @property
    def only_unk(self) -> bool:
        return bool(np.all(self.ids == UNK))


@dataclass
class Corpus:
    examples: list[Example]
    vocab: list[str]
    num_classes: int
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def subset(self, indices, split: str | None = None) -> "Corpus":
        return replace(self, examples=[self.examples[i] for i in indices],
                       split=split or self.split)

    def decode(self, ids) -> str:
        return detokenize([self.vocab[i] for i in ids])


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def build_vocab(texts, min_freq: int = 2) -> list[str]:
    counts = Counter(tok for t in texts for tok in tokenize(t))
    words = sorted(w for w, c in counts.items() if c >= min_freq and w not in RESERVED)
    return RESERVED + words


def encode(text: str, index: dict[str, int]) -> np.ndarray:
    toks = tokenize(text)[:MAX_TOKENS]
    return np.array([index.get(t, UNK) for t in toks], dtype=np.int64)


def _read_rows(path: Path, fmt: str):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                if fmt == "tsv":
                    text, label = line.rstrip("\n").rsplit("\t", 1)
                elif fmt in ("jsonl", "json-lines"):
                    obj = json.loads(line)
                    text, label = obj["text"], obj["label"]
                else:
                    raise ValueError(f"unknown format {fmt!r}")
                label = int(label)
            except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed row ({exc})") from None
            rows.append((lineno, text, label))
    return rows


def load_corpus(path, fmt: str = "tsv", *, vocab: list[str] | None = None,
                num_classes: int | None = None, min_freq: int = 2,
                split: str = "train") -> Corpus:
    """Read ``text<TAB>label`` or ``{"text":..., "label":...}`` lines.

    Without ``vocab`` the vocabulary is built from this file (pass the
    training file's vocabulary when loading evaluation splits).
    """
    path = Path(path)
    rows = _read_rows(path, fmt)
    for lineno, _, label in rows:
        if label < 0 or (num_classes is not None and label >= num_classes):
            raise ValueError(f"{path}:{lineno}: label {label} out of range")
    if num_classes is None:
        num_classes = max(2, max((r[2] for r in rows), default=0) + 1)
    if vocab is None:
        vocab = build_vocab([r[1] for r in rows], min_freq)
    index = {w: i for i, w in enumerate(vocab)}
    examples = []
    for lineno, text, label in rows:
        ids = encode(text, index)
        if ids.size == 0:
            raise ValueError(f"{path}:{lineno}: empty text")
        examples.append(Example(ids, label, uid=f"{path.stem}:{lineno}"))
    corpus = Corpus(examples, vocab, num_classes, split)
    corpus.meta["only_unk"] = [ex.uid for ex in examples if ex.only_unk]
    return corpus


def save_corpus(corpus: Corpus, path, fmt: str = "tsv") -> None:
    """Write text/label rows; polarity tags, when present, go to a sidecar
    ``<path>.polarity.jsonl``."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            text = corpus.decode(ex.ids)
            if fmt == "tsv":
                fh.write(f"{text}\t{ex.label}\n")
            else:
                fh.write(json.dumps({"text": text, "label": ex.label}) + "\n")
    if any(ex.polarity is not None for ex in corpus.examples):
        with open(str(path) + ".polarity.jsonl", "w", encoding="utf-8") as fh:
            for ex in corpus.examples:
                tags = [] if ex.polarity is None else ex.polarity.tolist()
                fh.write(json.dumps(tags) + "\n")


def split(corpus: Corpus, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError("fractions must be three non-negative numbers summing to 1")
    n = len(corpus)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(n - n_train, int(round(fractions[1] * n)))
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple(corpus.subset(sorted(p), s) for p, s in zip(parts, ("train", "val", "test")))


# ------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    """Token classes: each lexicon token pushes the score of one class by its
    magnitude; the label is the class with the largest summed score, and a
    sequence is only accepted if it wins by at least ``margin``."""

    num_classes: int = 2
    lexicon_per_class: int = 12
    neutral_tokens: int = 60
    magnitude: tuple[float, float] = (0.5, 2.0)
    length: tuple[int, int] = (12, 24)
    polar_tokens: tuple[int, int] = (2, 5)
    margin: float = 0.5
    noise: float = 0.0
    n_examples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.polar_tokens[0] < 1 or self.polar_tokens[1] > self.length[0]:
            raise ValueError("polar token count must fit the shortest sequence")


def lexicon(spec: SyntheticSpec):
    """Token strings, owning class (-1 for neutral) and magnitude."""
    rng = np.random.default_rng([spec.seed, 1])
    words, owner, mag = [], [], []
    for c in range(spec.num_classes):
        if spec.num_classes == 2:
            stem = ("neg", "pos")[c]
        else:
            stem = f"topic{c}"
        for j in range(spec.lexicon_per_class):
            words.append(f"{stem}{j}")
            owner.append(c)
            mag.append(rng.uniform(*spec.magnitude))
    for j in range(spec.neutral_tokens):
        words.append(f"filler{j}")
        owner.append(-1)
        mag.append(0.0)
    return words, np.array(owner), np.array(mag)


def class_scores(ids, owner_by_id, mag_by_id, num_classes) -> np.ndarray:
    scores = np.zeros(num_classes)
    for i in ids:
        if owner_by_id[i] >= 0:
            scores[owner_by_id[i]] += mag_by_id[i]
    return scores


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    words, owner, mag = lexicon(spec)
    vocab = RESERVED + words
    off = len(RESERVED)
    owner_by_id = np.concatenate([[-1] * off, owner])
    mag_by_id = np.concatenate([[0.0] * off, mag])
    polar_ids = [np.flatnonzero(owner == c) + off for c in range(spec.num_classes)]
    neutral_ids = np.flatnonzero(owner < 0) + off
    rng = np.random.default_rng(spec.seed)
    examples = []
    for n in range(spec.n_examples):
        target = int(rng.integers(spec.num_classes))
        while True:
            L = int(rng.integers(spec.length[0], spec.length[1] + 1))
            k = int(rng.integers(spec.polar_tokens[0], spec.polar_tokens[1] + 1))
            ids = rng.choice(neutral_ids, size=L)
            pos = rng.choice(L, size=k, replace=False)
            for p in pos:
                c = int(rng.integers(spec.num_classes))
                ids[p] = rng.choice(polar_ids[c])
            s = class_scores(ids, owner_by_id, mag_by_id, spec.num_classes)
            order = np.argsort(-s, kind="stable")
            if order[0] == target and s[order[0]] - s[order[1]] >= spec.margin:
                break
        tags = np.where(owner_by_id[ids] < 0, 0, np.where(owner_by_id[ids] == target, 1, -1))
        label = target
        if spec.noise > 0 and rng.random() < spec.noise:
            label = int((target + rng.integers(1, spec.num_classes)) % spec.num_classes)
        examples.append(Example(ids.astype(np.int64), label, tags.astype(np.int64), uid=f"syn{n}"))
    corpus = Corpus(examples, vocab, spec.num_classes, "train")
    corpus.meta["synthetic"] = True
    return corpus
