"""Faithfulness metrics: the polarity violation test plus AUC-TP,
sufficiency, comprehensiveness and rank correlation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .explain import Explanation
from .models import AttentionModel
from .perturb import (ReplacementStrategy, batch_probabilities, rank_by_magnitude, top_count,
                      top_fraction_indices)

METRICS = ("AUCTP", "Violation", "Suf", "Comp", "RC")


@dataclass
class MetricConfig:
    levels: tuple[float, ...] = (0.05, 0.10, 0.20, 0.50)
    thresholds: tuple[float, ...] = (0.0, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90)
    rc_mode: str = "single"          # or "cumulative"
    auc_mode: str = "accuracy"       # or "confidence"
    datamap_fraction: float = 0.10

    def __post_init__(self):
        self.levels = tuple(self.levels)
        self.thresholds = tuple(self.thresholds)
        if list(self.levels) != sorted(self.levels) or list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("levels and thresholds must be sorted ascending")
        if self.thresholds[0] != 0:
            raise ValueError("thresholds must start at 0")
        if self.rc_mode not in ("single", "cumulative"):
            raise ValueError(f"unknown rc_mode {self.rc_mode!r}")
        if self.auc_mode not in ("accuracy", "confidence"):
            raise ValueError(f"unknown auc_mode {self.auc_mode!r}")


# ---------------------------------------------------------------- helpers

def spearman(a, b) -> float:
    """Spearman's rho with average ranks for ties; NaN if either side is constant."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.size < 2:
        return math.nan
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0:
        return math.nan
    return float(ra @ rb) / den


def trapezoid_auc(x, y) -> float:
    """Area under ``y(x)`` normalised by the span of ``x``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0) / (x[-1] - x[0]))


def most_influential(weights) -> int:
    return int(rank_by_magnitude(weights)[0])


# --------------------------------------------------------- single metrics

@dataclass
class ViolationRecord:
    example_id: str
    index: int
    weight: float
    delta: float
    violation: int | None
    strategy: str


def violation_test(model: AttentionModel, ids, explanation: Explanation,
                   strategy: ReplacementStrategy, example_id: str = "",
                   predicted: int | None = None) -> ViolationRecord:
    """Flag a polarity violation: the largest-|weight| token's sign disagrees
    with the confidence change its removal causes.

    An all-zero explanation, or a one-token input, yields ``violation=None``.
    """
    w = explanation.weights
    ids = np.asarray(ids).reshape(-1)
    star = most_influential(w)
    if not np.any(w != 0) or len(ids) < 2:
        return ViolationRecord(example_id, star, float(w[star]), math.nan, None, strategy.name)
    base = model.probabilities(ids[None])[0]
    yhat = int(np.argmax(base)) if predicted is None else predicted
    pert = batch_probabilities(model, ids, [[star]], strategy)[0]
    delta = float(base[yhat] - pert[yhat])
    return ViolationRecord(example_id, star, float(w[star]), delta,
                           int(w[star] * delta < 0), strategy.name)


def _level_deltas(model, ids, weights, strategy, levels, mode):
    ids = np.asarray(ids).reshape(-1)
    base = model.probabilities(ids[None])[0]
    yhat = int(np.argmax(base))
    sets = [top_fraction_indices(weights, k, mode) for k in levels]
    probs = batch_probabilities(model, ids, sets, strategy)
    return base[yhat] - probs[:, yhat]


def sufficiency(model, ids, explanation, strategy, config: MetricConfig | None = None) -> float:
    """Mean confidence drop when only the top-k% tokens are kept."""
    config = config or MetricConfig()
    if len(np.asarray(ids).reshape(-1)) < 2:
        return math.nan
    return float(np.mean(_level_deltas(model, ids, explanation.weights, strategy,
                                       config.levels, "keep-top")))


def comprehensiveness(model, ids, explanation, strategy, config: MetricConfig | None = None) -> float:
    """Mean confidence drop when the top-k% tokens are removed."""
    config = config or MetricConfig()
    if len(np.asarray(ids).reshape(-1)) < 2:
        return math.nan
    return float(np.mean(_level_deltas(model, ids, explanation.weights, strategy,
                                       config.levels, "remove-top")))


def _rc_sets(order, rc_mode):
    if rc_mode == "single":
        return [[int(j)] for j in order]
    return [sorted(int(j) for j in order[:r]) for r in range(1, len(order))]


def rank_correlation(model, ids, explanation, strategy, config: MetricConfig | None = None) -> float:
    """Spearman correlation between sorted |weights| and the total absolute
    probability change caused by removing the token at each rank."""
    config = config or MetricConfig()
    ids = np.asarray(ids).reshape(-1)
    if len(ids) < 2:
        return math.nan
    order = rank_by_magnitude(explanation.weights)
    e_hat = np.abs(explanation.weights)[order]
    base = model.probabilities(ids[None])[0]
    probs = batch_probabilities(model, ids, _rc_sets(order, config.rc_mode), strategy)
    p = np.abs(base[None] - probs).sum(axis=1)
    return spearman(e_hat[: len(p)], p)


def auc_tp(model, corpus, explainer, strategy, config: MetricConfig | None = None) -> float:
    """Area under the accuracy-vs-removal-threshold curve over a corpus.

    ``explainer(ids) -> Explanation``.
    """
    config = config or MetricConfig()
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    perf = np.zeros((len(corpus), len(config.thresholds)))
    for r, ex in enumerate(corpus.examples):
        perf[r] = _threshold_scores(model, ex.ids, ex.label, explainer(ex.ids).weights,
                                    strategy, config)
    return trapezoid_auc(config.thresholds, perf.mean(axis=0))


def _threshold_scores(model, ids, label, weights, strategy, config) -> np.ndarray:
    ids = np.asarray(ids).reshape(-1)
    base = model.probabilities(ids[None])[0]
    yhat = int(np.argmax(base))
    order = rank_by_magnitude(weights)
    out = np.zeros(len(config.thresholds))
    sets, slots = [], []
    for j, t in enumerate(config.thresholds):
        k = 0 if t == 0 else min(top_count(len(ids), t), len(ids) - 1)
        if k == 0:
            out[j] = base[label] if config.auc_mode == "confidence" else float(yhat == label)
        else:
            sets.append(sorted(order[:k]))
            slots.append(j)
    if sets:
        probs = batch_probabilities(model, ids, sets, strategy)
        for j, pr in zip(slots, probs):
            out[j] = pr[label] if config.auc_mode == "confidence" else float(np.argmax(pr) == label)
    return out


# ------------------------------------------------------- batched per example

@dataclass
class ExampleRecord:
    example_id: str
    method: str
    strategy: str
    n_tokens: int
    label: int
    predicted: int
    x_star: int
    w_star: float
    delta: float | None
    violation: int | None
    sufficiency: float | None
    comprehensiveness: float | None
    rank_correlation: float | None
    threshold_scores: list[float]
    delta_top: float | None
    rank_weights: list[float] = field(default_factory=list)
    rank_deltas: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, allow_nan=False)

    @classmethod
    def from_json(cls, line: str) -> "ExampleRecord":
        return cls(**json.loads(line))


def _clean(x) -> float | None:
    return None if x is None or not math.isfinite(x) else float(x)


class PerturbationCache:
    """Probabilities of one example under one strategy, memoised by removal
    set so that methods sharing a perturbation share its forward pass."""

    def __init__(self, model: AttentionModel, ids, strategy: ReplacementStrategy):
        self.model, self.strategy = model, strategy
        self.ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        self.base = model.probabilities(self.ids[None])[0]
        self.predicted = int(np.argmax(self.base))
        self._memo: dict[tuple[int, ...], np.ndarray] = {}

    def fill(self, sets) -> None:
        todo = sorted({tuple(sorted(int(i) for i in s)) for s in sets} - self._memo.keys())
        if todo:
            probs = batch_probabilities(self.model, self.ids, todo, self.strategy)
            self._memo.update(zip(todo, probs))

    def __getitem__(self, removal) -> np.ndarray:
        return self._memo[tuple(sorted(int(i) for i in removal))]


PARTS = ("violation", "suf", "comp", "rc", "auc", "datamap")


def _plan(weights, n, config: MetricConfig, parts=PARTS):
    order = rank_by_magnitude(weights)
    if set(parts) <= {"violation", "suf", "comp"}:
        return {
            "order": order,
            "single": [[int(order[0])]],
            "suf": [top_fraction_indices(weights, k, "keep-top").tolist() for k in config.levels]
            if "suf" in parts else [],
            "comp": [top_fraction_indices(weights, k, "remove-top").tolist() for k in config.levels]
            if "comp" in parts else [],
            "cum": [], "dm": None, "thr": None, "partial": True,
        }
    plan = {
        "order": order,
        "single": [[int(j)] for j in order],
        "suf": [top_fraction_indices(weights, k, "keep-top").tolist() for k in config.levels],
        "comp": [top_fraction_indices(weights, k, "remove-top").tolist() for k in config.levels],
        "cum": _rc_sets(order, "cumulative") if config.rc_mode == "cumulative" else [],
        "dm": top_fraction_indices(weights, config.datamap_fraction, "remove-top").tolist(),
        "thr": [None if t == 0 else sorted(int(j) for j in order[:min(top_count(n, t), n - 1)])
                for t in config.thresholds],
        "partial": False,
    }
    return plan


def _plan_sets(plan):
    if plan["partial"]:
        return plan["single"] + plan["suf"] + plan["comp"]
    return (plan["single"] + plan["suf"] + plan["comp"] + plan["cum"] + [plan["dm"]]
            + [s for s in plan["thr"] if s is not None])


def evaluate_methods(model: AttentionModel, ids, label: int, explanations,
                     strategy: ReplacementStrategy, config: MetricConfig,
                     example_id: str = "", cache: PerturbationCache | None = None,
                     parts=PARTS) -> list[ExampleRecord]:
    """Per-example records for several explanations of the same input,
    computed from one deduplicated batch of perturbed passes.

    ``parts`` limited to a subset of violation/suf/comp skips the other
    metrics (left as ``None``) and their forward passes.
    """
    cache = cache or PerturbationCache(model, ids, strategy)
    n = len(cache.ids)
    base, yhat = cache.base, cache.predicted
    score = (lambda pr: float(pr[label])) if config.auc_mode == "confidence" else \
        (lambda pr: float(np.argmax(pr) == label))
    plans = []
    for exp in explanations:
        if len(exp.weights) != n:
            raise ValueError(f"{exp.method}: {len(exp.weights)} weights for {n} tokens")
        plans.append(_plan(exp.weights, n, config, parts) if n >= 2 else None)
    if n >= 2:
        cache.fill(s for plan in plans for s in _plan_sets(plan))
    records = []
    for exp, plan in zip(explanations, plans):
        w = exp.weights
        order = rank_by_magnitude(w)
        star = int(order[0])
        if plan is None:
            records.append(ExampleRecord(
                example_id, exp.method, strategy.name, n, int(label), yhat, star, float(w[star]),
                None, None, None, None, None, [score(base)] * len(config.thresholds), None,
                [float(v) for v in w[order]], []))
            continue
        drop = lambda s: float(base[yhat] - cache[s][yhat])  # noqa: E731
        rank_deltas = [drop(s) for s in plan["single"]]
        violation = int(w[star] * rank_deltas[0] < 0) if np.any(w != 0) else None
        if plan["partial"]:
            records.append(ExampleRecord(
                example_id, exp.method, strategy.name, n, int(label), yhat, star, float(w[star]),
                rank_deltas[0], violation,
                float(np.mean([drop(s) for s in plan["suf"]])) if plan["suf"] else None,
                float(np.mean([drop(s) for s in plan["comp"]])) if plan["comp"] else None,
                None, [], None, [float(v) for v in w[order]], []))
            continue
        suf = float(np.mean([drop(s) for s in plan["suf"]]))
        comp = float(np.mean([drop(s) for s in plan["comp"]]))
        rc_sets = plan["single"] if config.rc_mode == "single" else plan["cum"]
        p = np.array([np.abs(base - cache[s]).sum() for s in rc_sets])
        rc = spearman(np.abs(w)[order][: len(p)], p)
        thr = [score(base) if s is None else score(cache[s]) for s in plan["thr"]]
        delta = rank_deltas[0]
        records.append(ExampleRecord(
            example_id, exp.method, strategy.name, n, int(label), yhat, star, float(w[star]),
            delta, violation, suf, comp, _clean(rc), thr, drop(plan["dm"]),
            [float(v) for v in w[order]], rank_deltas))
    return records


def evaluate_example(model: AttentionModel, ids, label: int, explanation: Explanation,
                     strategy: ReplacementStrategy, config: MetricConfig,
                     example_id: str = "") -> ExampleRecord:
    """Every per-example metric for one explanation."""
    return evaluate_methods(model, ids, label, [explanation], strategy, config, example_id)[0]


# ----------------------------------------------------------- aggregation

@dataclass
class FaithfulnessReport:
    """Per (group, method, strategy) metric values plus strategy averages."""

    per_strategy: dict[tuple[str, str, str], dict[str, float]]
    aggregate: dict[tuple[str, str], dict[str, float]]
    counts: dict[tuple[str, str, str], dict[str, int]]

    def table_rows(self):
        for (group, method), vals in sorted(self.aggregate.items()):
            yield {"group": group, "method": method, **{m: vals[m] for m in METRICS}}


def summarize(records: list[ExampleRecord], config: MetricConfig) -> tuple[dict[str, float], dict[str, int]]:
    """Metric values over one (method, strategy) set of records; undefined
    per-example values are excluded and counted."""
    def mean_of(attr):
        vals = [getattr(r, attr) for r in records if getattr(r, attr) is not None]
        return (float(np.mean(vals)) if vals else math.nan), len(records) - len(vals)

    viol, viol_undef = mean_of("violation")
    suf, suf_undef = mean_of("sufficiency")
    comp, comp_undef = mean_of("comprehensiveness")
    rc, rc_undef = mean_of("rank_correlation")
    if records and all(r.threshold_scores for r in records):
        curve = np.mean([r.threshold_scores for r in records], axis=0)
        auc = trapezoid_auc(config.thresholds, curve)
    else:
        auc = math.nan
    values = {"AUCTP": auc, "Violation": viol, "Suf": suf, "Comp": comp, "RC": rc}
    counts = {"n": len(records), "violation_undefined": viol_undef, "suf_undefined": suf_undef,
              "comp_undefined": comp_undef, "rc_undefined": rc_undef}
    return values, counts


def aggregate(per_strategy: dict[str, dict[str, float]]) -> dict[str, float]:
    """Unweighted mean over strategies, metric by metric (NaNs skipped)."""
    out = {}
    for m in METRICS:
        vals = [v[m] for v in per_strategy.values() if v.get(m) is not None and math.isfinite(v[m])]
        out[m] = float(np.mean(vals)) if vals else math.nan
    return out


def build_report(records: list[ExampleRecord], config: MetricConfig,
                 group_of=lambda r: "all") -> FaithfulnessReport:
    buckets: dict[tuple[str, str, str], list[ExampleRecord]] = {}
    for r in records:
        buckets.setdefault((group_of(r), r.method, r.strategy), []).append(r)
    per, counts = {}, {}
    for key in sorted(buckets):
        per[key], counts[key] = summarize(buckets[key], config)
    agg: dict[tuple[str, str], dict[str, float]] = {}
    for group, method in sorted({(g, m) for g, m, _ in per}):
        agg[(group, method)] = aggregate({s: v for (g, m, s), v in per.items()
                                          if g == group and m == method})
    return FaithfulnessReport(per, agg, counts)


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.6f}"


def write_report(report: FaithfulnessReport, csv_path, json_path=None) -> None:
    """Aggregate table (group, method, AUCTP, Violation, Suf, Comp, RC) as CSV;
    optionally the per-strategy values and counts as JSON."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "method", *METRICS])
        for row in report.table_rows():
            w.writerow([row["group"], row["method"], *(_fmt(row[m]) for m in METRICS)])
    if json_path is not None:
        out = [
            {"group": g, "method": m, "strategy": s,
             **{k: (None if not math.isfinite(v) else v) for k, v in vals.items()},
             **report.counts[(g, m, s)]}
            for (g, m, s), vals in sorted(report.per_strategy.items())
        ]
        with open(json_path, "w", encoding="utf-8") as fh:
            json.dump(out, fh, indent=1, sort_keys=True)
            fh.write("\n")
