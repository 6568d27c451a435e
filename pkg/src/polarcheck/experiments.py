"""End-to-end experiments: training, the evaluation grid, the gradient
ablation, the depth study, and plot-ready data files.

Every function takes an :class:`ExperimentConfig` and an output directory and
writes only deterministic content: no timestamps, sorted keys, fixed float
formatting, and per-example seeds derived from stable hashes.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import plotting
from .data import Corpus, SyntheticSpec, generate_synthetic, load_corpus, split
from .explain import ABLATIONS, ALL_METHODS, explain, methods_for
from .metrics import (MetricConfig, ExampleRecord, PerturbationCache, build_report,
                      evaluate_methods, spearman)
from .models import (GENERAL_MODELS, ZOO, AttentionModel, ModelSpec, TrainConfig, accuracy,
                     load_checkpoint, predict_traced, save_checkpoint, train)
from .perturb import STRATEGY_KINDS, ReplacementStrategy

log = logging.getLogger("polarcheck")

FULL = ("violation", "suf", "comp", "rc", "auc", "datamap")
VIOLATION_ONLY = ("violation",)

DEFAULTS: dict = {
    "datasets": [
        {"name": "sentiment", "kind": "synthetic", "num_classes": 2, "n_examples": 2000,
         "seed": 0, "fractions": [0.6, 0.1, 0.3]},
    ],
    "models": list(ZOO),
    "model": {"embed_dim": 64, "hidden_dim": 64, "att_dim": 64, "kernel_width": 3,
              "layers": 2, "heads": 2, "head_depth": 1, "head_activation": "tanh"},
    "train": {"epochs": 15, "batch_size": 32, "lr": 1e-3, "patience": 3,
              "accuracy_floor": 0.85},
    "methods": "all",
    "strategies": list(STRATEGY_KINDS),
    "metrics": {"levels": [0.05, 0.10, 0.20, 0.50],
                "thresholds": [0.0, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.90],
                "rc_mode": "single", "auc_mode": "accuracy", "datamap_fraction": 0.10},
    "eval": {"max_examples": 200, "ig_steps": 50, "ig_baseline": "mask", "score": "logit"},
    "ablation": {"models": list(GENERAL_MODELS)},
    "depth_study": {"depths": [1, 2, 4, 6], "models": list(GENERAL_MODELS),
                    "methods": ["RawAtt", "AttGrad", "AttIN", "InputGrad"]},
    "seeds": [0],
    "checkpoints": None,
    "figures": True,
}

SYNTHETIC_KEYS = {f for f in SyntheticSpec.__dataclass_fields__}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_key(config: dict, dotted: str, value) -> None:
    """Assign ``a.b.c = value`` in a nested mapping, creating levels."""
    keys = dotted.split(".")
    node = config
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ValueError(f"{dotted}: {k} is not a mapping")
    node[keys[-1]] = value


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.raw = _merge(DEFAULTS, self.raw)
        self.validate()

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "ExperimentConfig":
        raw = {}
        if path is not None:
            with open(path, encoding="utf-8") as fh:
                raw = yaml.safe_load(fh) or {}
            if not isinstance(raw, dict):
                raise ValueError(f"{path}: config must be a mapping")
        for k, v in (overrides or {}).items():
            set_key(raw, k, v)
        return cls(raw)

    def validate(self) -> None:
        r = self.raw
        for name in r["models"] + r["ablation"]["models"] + r["depth_study"]["models"]:
            if name not in ZOO:
                raise ValueError(f"unknown model {name!r}; known: {sorted(ZOO)}")
        for name in self.strategies_names:
            ReplacementStrategy.parse(name)
        methods = [] if r["methods"] == "all" else list(r["methods"])
        for name in methods + list(r["depth_study"]["methods"]):
            if name not in ALL_METHODS:
                raise ValueError(f"unknown method {name!r}; known: {list(ALL_METHODS)}")
        MetricConfig(**r["metrics"])
        TrainConfig(**r["train"])
        if not r["seeds"]:
            raise ValueError("at least one seed is required")
        names = [d.get("name") for d in r["datasets"]]
        if not r["datasets"] or None in names or len(set(names)) != len(names):
            raise ValueError("datasets need unique names")
        for d in r["datasets"]:
            if d.get("kind", "synthetic") not in ("synthetic", "files"):
                raise ValueError(f"dataset {d['name']}: kind must be synthetic or files")
        if any(int(x) < 1 for x in r["depth_study"]["depths"]):
            raise ValueError("depths must be >= 1")

    # -- typed views
    @property
    def strategies_names(self) -> list[str]:
        return list(self.raw["strategies"])

    @property
    def strategies(self) -> list[ReplacementStrategy]:
        return [ReplacementStrategy.parse(s) for s in self.strategies_names]

    @property
    def metric_config(self) -> MetricConfig:
        return MetricConfig(**self.raw["metrics"])

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.raw["train"])

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.raw["seeds"]]

    def methods_for(self, model: AttentionModel) -> list[str]:
        available = methods_for(model)
        if self.raw["methods"] == "all":
            return list(available)
        extra = [m for m in self.raw["methods"] if m in ("AttGradAbs", "AttGradSign")]
        return [m for m in self.raw["methods"] if m in available] + extra

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=False)


# ---------------------------------------------------------------- io helpers

class RunLog:
    """Plain-text run log without timestamps, so reruns compare equal."""

    def __init__(self, path: Path):
        self.path = path
        self.handler = logging.FileHandler(path, mode="w", encoding="utf-8")
        self.handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))

    def __enter__(self):
        log.addHandler(self.handler)
        if log.level == logging.NOTSET or log.level > logging.INFO:
            log.setLevel(logging.INFO)
        return self

    def __exit__(self, *exc):
        log.removeHandler(self.handler)
        self.handler.close()


def _prepare_out(config: ExperimentConfig, out, command: str) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config.yaml").write_text(config.dump(), encoding="utf-8")
    return out


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not math.isfinite(x)):
        return "nan"
    return f"{x:.6f}" if isinstance(x, float) else str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def stable_seed(*parts) -> int:
    return zlib.crc32("/".join(str(p) for p in parts).encode("utf-8"))


# ------------------------------------------------------------------ datasets

_DATA_CACHE: dict[str, tuple[Corpus, Corpus, Corpus]] = {}


def load_dataset(ds: dict) -> tuple[Corpus, Corpus, Corpus]:
    """``(train, val, test)`` for one dataset entry of the config.

    ``kind: synthetic`` generates a corpus from :class:`SyntheticSpec` fields
    and splits it by ``fractions``.  ``kind: files`` reads ``train``/``val``/
    ``test`` paths; the vocabulary comes from the training file only.
    """
    key = json.dumps(ds, sort_keys=True)
    if key in _DATA_CACHE:
        return _DATA_CACHE[key]
    if ds.get("kind", "synthetic") == "synthetic":
        kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in ds.items() if k in SYNTHETIC_KEYS}
        corpus = generate_synthetic(SyntheticSpec(**kw))
        parts = split(corpus, tuple(ds.get("fractions", (0.6, 0.1, 0.3))), int(ds.get("seed", 0)))
    else:
        fmt = ds.get("format", "tsv")
        n_cls = ds.get("num_classes")
        train_c = load_corpus(ds["train"], fmt, num_classes=n_cls, split="train")
        val_c = (load_corpus(ds["val"], fmt, vocab=train_c.vocab, num_classes=train_c.num_classes,
                             split="val") if ds.get("val") else train_c.subset([], "val"))
        test_c = load_corpus(ds["test"], fmt, vocab=train_c.vocab, num_classes=train_c.num_classes,
                             split="test")
        parts = (train_c, val_c, test_c)
    _DATA_CACHE[key] = parts
    return parts


def eval_examples(config: ExperimentConfig, ds: dict) -> Corpus:
    test = load_dataset(ds)[2]
    n = min(len(test), int(config.raw["eval"]["max_examples"]))
    return test.subset(range(n))


# ------------------------------------------------------------------- models

def _checkpoint_dir(config: ExperimentConfig, out: Path) -> Path:
    ck = config.raw["checkpoints"]
    return Path(ck) if ck else out / "checkpoints"


def checkpoint_path(config: ExperimentConfig, out: Path, dataset: str, model: str,
                    seed: int, depth: int | None = None) -> Path:
    depth = config.raw["model"]["head_depth"] if depth is None else depth
    return _checkpoint_dir(config, out) / dataset / f"{model}-d{depth}-s{seed}.ckpt"


def model_spec(config: ExperimentConfig, ds: dict, name: str, seed: int,
               depth: int | None = None) -> ModelSpec:
    train_c = load_dataset(ds)[0]
    kw = dict(config.raw["model"])
    if depth is not None:
        kw["head_depth"] = depth
    return ModelSpec.from_zoo(name, num_classes=train_c.num_classes,
                              vocab_size=len(train_c.vocab), seed=seed, **kw)


def _train_one(config, out, ds, name, seed, depth=None) -> tuple[AttentionModel, Path]:
    train_c, val_c, test_c = load_dataset(ds)
    spec = model_spec(config, ds, name, seed, depth)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = train(train_c, spec, config.train_config, val_c)
    for w in caught:
        log.warning("%s", w.message)
    path = checkpoint_path(config, out, ds["name"], name, seed, spec.head_depth)
    save_checkpoint(model, path)
    model.metadata["test_accuracy"] = accuracy(model, test_c)
    log.info("trained %s on %s seed %d depth %d: epochs %d train %.4f val %.4f test %.4f",
             name, ds["name"], seed, spec.head_depth, model.metadata["epochs"],
             model.metadata["train_accuracy"], model.metadata["val_accuracy"],
             model.metadata["test_accuracy"])
    return model, path


def obtain_model(config, out, ds, name, seed, depth=None, train_missing=False) -> AttentionModel:
    path = checkpoint_path(config, out, ds["name"], name, seed, depth)
    if path.exists():
        return load_checkpoint(path)
    if not train_missing:
        raise FileNotFoundError(f"missing checkpoint {path}; run the train command first")
    return _train_one(config, out, ds, name, seed, depth)[0]


def run_train(config: ExperimentConfig, out) -> list[Path]:
    """One checkpoint per (dataset, model, seed) plus ``train.csv``."""
    out = _prepare_out(config, out, "train")
    paths, rows = [], []
    with RunLog(out / "train.log"):
        for ds in config.raw["datasets"]:
            for name in config.raw["models"]:
                for seed in config.seeds:
                    model, path = _train_one(config, out, ds, name, seed)
                    md = model.metadata
                    paths.append(path)
                    rows.append([ds["name"], name, model.spec.head_depth, seed, md["epochs"],
                                 md["train_accuracy"], md["val_accuracy"], md["test_accuracy"],
                                 int(md["below_floor"]),
                                 path.relative_to(out).as_posix() if path.is_relative_to(out)
                                 else path.as_posix()])
        _write_csv(out / "train.csv", ["dataset", "model", "depth", "seed", "epochs",
                                       "train_accuracy", "val_accuracy", "test_accuracy",
                                       "below_floor", "checkpoint"], rows)
    return paths


# --------------------------------------------------------------- evaluation

def _records_dir(out: Path, parts, dataset, model, depth, seed) -> Path:
    kind = "full" if tuple(parts) == FULL else "-".join(parts)
    return out / "records" / kind / dataset / f"{model}-d{depth}-s{seed}"


def _record_file(rdir: Path, method: str, strategy: str) -> Path:
    return rdir / f"{method}__{strategy}.jsonl"


def explain_all(config: ExperimentConfig, model: AttentionModel, corpus: Corpus, methods,
                seed: int) -> list[dict]:
    ev = config.raw["eval"]
    out = []
    for ex in corpus:
        trace = predict_traced(model, ex.ids)
        out.append({m: explain(m, model, ex.ids, trace=trace, seed=stable_seed(ex.uid, seed),
                               ig_steps=int(ev["ig_steps"]), ig_baseline=ev["ig_baseline"],
                               score=ev["score"])
                    for m in methods})
    return out


def evaluate_model(config: ExperimentConfig, out: Path, ds: dict, model: AttentionModel,
                   methods, seed: int, parts=FULL) -> list[ExampleRecord]:
    """Records for every (method, strategy) of one model, resuming from the
    per-(method, strategy) JSON-lines files already present."""
    corpus = eval_examples(config, ds)
    mcfg = config.metric_config
    rdir = _records_dir(out, parts, ds["name"], model.spec.name, model.spec.head_depth, seed)
    pending = [(m, s) for s in config.strategies for m in methods
               if not _record_file(rdir, m, s.name).exists()]
    if pending:
        todo = sorted({m for m, _ in pending}, key=list(methods).index)
        log.info("evaluating %s on %s seed %d: %d examples, %d pending (method, strategy) pairs",
                 model.spec.name, ds["name"], seed, len(corpus), len(pending))
        exps = explain_all(config, model, corpus, todo, seed)
        for strat in config.strategies:
            mine = [m for m in todo if (m, strat) in pending]
            if not mine:
                continue
            by_method: dict[str, list[str]] = {m: [] for m in mine}
            for ex, ex_exps in zip(corpus, exps):
                cache = PerturbationCache(model, ex.ids, strat)
                recs = evaluate_methods(model, ex.ids, ex.label, [ex_exps[m] for m in mine], strat,
                                        mcfg, ex.uid, cache, parts)
                for r in recs:
                    by_method[r.method].append(r.to_json())
            for m in mine:
                _atomic_write(_record_file(rdir, m, strat.name),
                              "".join(line + "\n" for line in by_method[m]))
    records = []
    for s in config.strategies:
        for m in methods:
            with open(_record_file(rdir, m, s.name), encoding="utf-8") as fh:
                records.extend(ExampleRecord.from_json(line) for line in fh if line.strip())
    return records


def _tag(records, **tags):
    return [(tags, r) for r in records]


def run_evaluate(config: ExperimentConfig, out) -> dict:
    """Full methods x metrics x strategies grid for every trained model.

    Writes ``evaluation.csv`` (strategy-averaged, one row per group and
    method), ``evaluation_grid.csv`` (long form) and per-example records.
    """
    out = _prepare_out(config, out, "evaluate")
    mcfg = config.metric_config
    tagged = []
    with RunLog(out / "evaluate.log"):
        for ds in config.raw["datasets"]:
            for name in config.raw["models"]:
                for seed in config.seeds:
                    model = obtain_model(config, out, ds, name, seed)
                    recs = evaluate_model(config, out, ds, model, config.methods_for(model), seed)
                    tagged += [(f"{ds['name']}/{name}", r) for r in recs]
        groups = {id(r): g for g, r in tagged}
        report = build_report([r for _, r in tagged], mcfg, lambda r: groups[id(r)])
        rows = [[g, m, *(v[k] for k in ("AUCTP", "Violation", "Suf", "Comp", "RC"))]
                for (g, m), v in sorted(report.aggregate.items())]
        _write_csv(out / "evaluation.csv", ["group", "method", "AUCTP", "Violation", "Suf", "Comp", "RC"],
                   rows)
        grid = [[g, m, s, k, v] for (g, m, s), vals in sorted(report.per_strategy.items())
                for k, v in vals.items()]
        _write_csv(out / "evaluation_grid.csv", ["group", "method", "strategy", "metric", "value"], grid)
        counts = [[g, m, s, *c.values()] for (g, m, s), c in sorted(report.counts.items())]
        _write_csv(out / "evaluation_counts.csv",
                   ["group", "method", "strategy", *next(iter(report.counts.values())).keys()], counts)
        log.info("evaluation: %d records in %d groups", len(tagged), len({g for g, _ in tagged}))
        if config.raw["figures"]:
            plotting.violation_bars(rows, out / "evaluation_violation.png")
    return {"report": report, "rows": rows}


def violation_ratio(records) -> float:
    vals = [r.violation for r in records if r.violation is not None]
    return float(np.mean(vals)) if vals else math.nan


def strategy_mean_violation(records, strategies) -> float:
    """Unweighted mean over strategies of the per-strategy violation ratio."""
    vals = [violation_ratio([r for r in records if r.strategy == s]) for s in strategies]
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan


def run_ablation(config: ExperimentConfig, out) -> list[list]:
    """Violation of alpha, alpha*grad, alpha*|grad|, alpha*sign(grad) per
    dataset, averaged over the ablation models, seeds and strategies.

    Missing checkpoints are trained on demand.
    """
    out = _prepare_out(config, out, "ablate")
    names = [s.name for s in config.strategies]
    rows = []
    with RunLog(out / "ablate.log"):
        for ds in config.raw["datasets"]:
            per_method: dict[str, list[float]] = {m: [] for m in ABLATIONS}
            per_strategy: dict[tuple[str, str], list[float]] = {}
            for name in config.raw["ablation"]["models"]:
                for seed in config.seeds:
                    model = obtain_model(config, out, ds, name, seed, train_missing=True)
                    recs = evaluate_model(config, out, ds, model, ABLATIONS, seed, VIOLATION_ONLY)
                    for m in ABLATIONS:
                        mine = [r for r in recs if r.method == m]
                        per_method[m].append(strategy_mean_violation(mine, names))
                        for s in names:
                            per_strategy.setdefault((m, s), []).append(
                                violation_ratio([r for r in mine if r.strategy == s]))
            for m in ABLATIONS:
                rows.append([ds["name"], m, float(np.mean(per_method[m])),
                             *(float(np.mean(per_strategy[(m, s)])) for s in names)])
                log.info("ablation %s %s: violation %.4f", ds["name"], m, rows[-1][2])
        _write_csv(out / "ablation.csv", ["dataset", "method", "violation", *names], rows)
        if config.raw["figures"]:
            plotting.ablation_bars(rows, out / "ablation.png")
    return rows


def run_depth_study(config: ExperimentConfig, out, depths=None) -> dict:
    """Violation ratio per classifier-head depth and method, averaged over the
    study models, seeds and strategies; plus the Spearman trend per method."""
    out = _prepare_out(config, out, "depth-study")
    study = config.raw["depth_study"]
    depths = [int(d) for d in (depths or study["depths"])]
    methods = list(study["methods"])
    names = [s.name for s in config.strategies]
    curve, rows = {}, []
    with RunLog(out / "depth-study.log"):
        for d in depths:
            cells: dict[str, list[float]] = {m: [] for m in methods}
            for ds in config.raw["datasets"]:
                for name in study["models"]:
                    for seed in config.seeds:
                        model = obtain_model(config, out, ds, name, seed, depth=d, train_missing=True)
                        recs = evaluate_model(config, out, ds, model, methods, seed, VIOLATION_ONLY)
                        for m in methods:
                            cells[m].append(strategy_mean_violation(
                                [r for r in recs if r.method == m], names))
            for m in methods:
                curve[(d, m)] = float(np.mean(cells[m]))
                rows.append([d, m, curve[(d, m)]])
                log.info("depth %d %s: violation %.4f", d, m, curve[(d, m)])
        _write_csv(out / "depth_study.csv", ["depth", "method", "ratio"], rows)
        trend = {m: spearman(depths, [curve[(d, m)] for d in depths]) for m in methods}
        _write_csv(out / "depth_trend.csv", ["method", "spearman"],
                   [[m, trend[m]] for m in methods])
        if config.raw["figures"]:
            plotting.depth_curves(depths, methods, curve, out / "depth_study.png")
    return {"curve": curve, "trend": trend, "rows": rows}


def _full_records(config, out):
    for ds in config.raw["datasets"]:
        for name in config.raw["models"]:
            for seed in config.seeds:
                model = obtain_model(config, out, ds, name, seed)
                yield ds["name"], name, seed, evaluate_model(
                    config, out, ds, model, config.methods_for(model), seed)


def run_datamap(config: ExperimentConfig, out) -> list[list]:
    """Per example: rank correlation, confidence change after removing the
    top fraction by |weight|, and the violation flag."""
    out = _prepare_out(config, out, "datamap")
    rows = []
    with RunLog(out / "datamap.log"):
        for ds, name, seed, recs in _full_records(config, out):
            for r in recs:
                rows.append([ds, name, seed, r.method, r.strategy, r.example_id,
                             r.rank_correlation, r.delta_top,
                             "nan" if r.violation is None else r.violation])
        _write_csv(out / "datamap.csv", ["dataset", "model", "seed", "method", "strategy",
                                         "example_id", "rank_correlation", "delta_c", "violation"],
                   rows)
        log.info("datamap: %d points", len(rows))
        if config.raw["figures"]:
            plotting.datamap_scatter(rows, out / "datamap.png")
    return rows


def behavior_profile(records, max_len: int) -> list[list]:
    """Mean weight and mean confidence change at each |weight| rank, for
    violators and non-violators separately."""
    out = []
    for group, flag in (("violator", 1), ("non-violator", 0)):
        mine = [r for r in records if r.violation == flag]
        for quantity, attr in (("weight", "rank_weights"), ("delta_c", "rank_deltas")):
            cols = []
            for k in range(max_len):
                vals = [getattr(r, attr)[k] for r in mine if len(getattr(r, attr)) > k]
                cols.append(float(np.mean(vals)) if vals else math.nan)
            out.append([group, quantity, len(mine), *cols])
    return out


def run_behavior(config: ExperimentConfig, out) -> list[list]:
    out = _prepare_out(config, out, "behavior")
    max_len = int(config.raw["model"].get("max_len", 64))
    rows = []
    with RunLog(out / "behavior.log"):
        for ds, name, seed, recs in _full_records(config, out):
            keys = sorted({(r.method, r.strategy) for r in recs})
            for m, s in keys:
                prof = behavior_profile([r for r in recs if r.method == m and r.strategy == s], max_len)
                rows += [[ds, name, seed, m, s, *p] for p in prof]
        header = ["dataset", "model", "seed", "method", "strategy", "group", "quantity", "n",
                  *(f"rank_{k + 1}" for k in range(max_len))]
        _write_csv(out / "behavior.csv", header, rows)
        log.info("behavior: %d profile rows", len(rows))
        if config.raw["figures"]:
            plotting.behavior_bars(rows, max_len, out / "behavior.png")
    return rows


COMMANDS = {
    "train": run_train,
    "evaluate": run_evaluate,
    "ablate": run_ablation,
    "depth-study": run_depth_study,
    "datamap": run_datamap,
    "behavior": run_behavior,
}
