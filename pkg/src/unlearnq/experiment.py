"""End-to-end runs: data -> original model -> Retrain reference -> unlearning -> metrics.

Configuration is flat ``section.key = value`` text. ``ExperimentConfig``
holds the parsed values with defaults for a small two-moons problem.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import __version__
from .data import LabeledSet, Split, gen_synthetic, split_classwise, split_random, train_test_split
from .gop import ProjectionConfig
from .losses import mean_entropy
from .metrics import MIA_CONVENTION, average_gap, evaluate, make_eval_sets
from .net import NetConfig, ParameterSet
from .unlearner import METHODS, TrainConfig, UnlearnConfig, retrain, train_original, unlearn


class ConfigError(ValueError):
    pass


# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "data.kind": (str, "moons"),
    "data.classes": (int, 2),
    "data.n": (int, 1000),
    "data.noise": (float, 0.2),
    "data.dim": (int, 2),
    "data.test_fraction": (float, 0.3),
    "split.scenario": (str, "random"),
    "split.ratio": (float, 0.1),
    "split.class_id": (int, 0),
    "net.hidden": (list, [32, 32]),
    "quant.weight_bits": (int, 4),
    "quant.act_bits": (int, 4),
    "train.epochs": (int, 40),
    "train.lr": (float, 0.1),
    "train.batch_size": (int, 32),
    "train.cosine": (bool, True),
    "train.qat_epochs": (int, 10),
    "unlearn.method": (str, "oeu"),
    "unlearn.epochs": (int, 10),
    "unlearn.lr": (float, 0.05),
    "unlearn.batch_size": (int, 32),
    "unlearn.cosine": (bool, False),
    "unlearn.beta": (float, 1.0),
    "unlearn.alpha": (float, 1.0),
    "unlearn.mode": (str, "layerwise"),
    "unlearn.epsilon": (float, 1e-12),
    "run.seeds": (list, [0]),
    "run.out": (str, "runs"),
}


def _coerce(key: str, raw: str, lineno: Optional[int] = None):
    typ = SCHEMA[key][0]
    where = f"line {lineno}: " if lineno is not None else ""
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is list:
            return [int(v) for v in raw.split(",") if v.strip()]
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{where}{key}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_config(text: str) -> dict:
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored) over the defaults."""
    values = {k: d for k, (_, d) in SCHEMA.items()}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, lineno)
    validate(values)
    return values


def override(values: dict, key: str, raw) -> dict:
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}")
    out = dict(values)
    out[key] = _coerce(key, str(raw)) if isinstance(raw, str) else raw
    validate(out)
    return out


def validate(v: dict) -> None:
    if v["split.scenario"] not in ("random", "classwise"):
        raise ConfigError(f"split.scenario: expected random or classwise, got {v['split.scenario']!r}")
    if v["unlearn.method"] not in METHODS:
        raise ConfigError(f"unlearn.method: unknown method {v['unlearn.method']!r}; valid: {', '.join(METHODS)}")
    if v["unlearn.mode"] not in ("global", "layerwise"):
        raise ConfigError("unlearn.mode: expected global or layerwise")
    if not 0.0 <= v["unlearn.alpha"] <= 1.0:
        raise ConfigError("unlearn.alpha: must lie in [0, 1]")
    if v["unlearn.beta"] < 0:
        raise ConfigError("unlearn.beta: must be non-negative")
    for k in ("quant.weight_bits", "quant.act_bits"):
        if v[k] != 0 and v[k] < 2:
            raise ConfigError(f"{k}: use 0 to disable or a width >= 2")
    if not 0 < v["split.ratio"] < 1:
        raise ConfigError("split.ratio: must lie in (0, 1)")
    if not v["run.seeds"]:
        raise ConfigError("run.seeds: at least one seed is required")


def dump_config(values: dict, skip=()) -> str:
    lines = []
    for k in SCHEMA:
        if k in skip:
            continue
        v = values[k]
        if isinstance(v, list):
            v = ",".join(str(i) for i in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def config_hash(values: dict, exclude=("run.seeds", "run.out")) -> str:
    canon = json.dumps({k: values[k] for k in SCHEMA if k not in exclude}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def net_config(v: dict) -> NetConfig:
    widths = [v["data.dim"], *v["net.hidden"], v["data.classes"]]
    return NetConfig(tuple(widths), weight_bits=v["quant.weight_bits"] or None,
                     act_bits=v["quant.act_bits"] or None)


def train_config(v: dict, seed: int) -> TrainConfig:
    return TrainConfig(epochs=v["train.epochs"], lr=v["train.lr"], batch_size=v["train.batch_size"],
                       cosine=v["train.cosine"], seed=seed, qat_epochs=v["train.qat_epochs"])


def unlearn_config(v: dict, seed: int, method: Optional[str] = None) -> UnlearnConfig:
    return UnlearnConfig(
        method=method or v["unlearn.method"],
        epochs=v["unlearn.epochs"],
        lr=v["unlearn.lr"],
        batch_size=v["unlearn.batch_size"] or None,
        cosine=v["unlearn.cosine"],
        beta=v["unlearn.beta"],
        projection=ProjectionConfig(v["unlearn.mode"], v["unlearn.alpha"], v["unlearn.epsilon"]),
        seed=seed,
    )


def build_split(v: dict, seed: int) -> Split:
    data = gen_synthetic(v["data.kind"], v["data.classes"], v["data.n"], v["data.noise"], seed=seed,
                         dim=v["data.dim"])
    train, test = train_test_split(data, v["data.test_fraction"], seed)
    if v["split.scenario"] == "random":
        return split_random(train, v["split.ratio"], seed, test=test)
    return split_classwise(train, v["split.class_id"], seed, test=test)


@dataclass
class Workbench:
    """Everything a set of methods shares for one (config, seed)."""

    values: dict
    seed: int
    split: Split
    params0: ParameterSet
    cfg0: NetConfig
    retrain_raw: dict
    original_raw: dict
    eval_sets: object
    timings: dict = field(default_factory=dict)
    retrain_model: Optional[tuple] = None


_RETRAIN_CACHE: dict[str, tuple] = {}

TRAIN_PREFIXES = ("data.", "split.", "net.", "quant.", "train.")


def model_key(v: dict) -> str:
    """Hash of everything that determines the original and Retrain models (seed excluded)."""
    parts = {k: v[k] for k in SCHEMA if k.startswith(TRAIN_PREFIXES)}
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def retrain_key(v: dict, split: Split) -> str:
    parts = {k: v[k] for k in SCHEMA if k.startswith(("net.", "quant.", "train."))}
    parts["split"] = split.digest()
    return hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).hexdigest()[:16]


def prepare(values: dict, seed: int, original: Optional[tuple] = None,
            retrain_model: Optional[tuple] = None) -> Workbench:
    """Build the split, the original model and the Retrain reference for one seed.

    ``original`` / ``retrain_model`` are ``(params, cfg)`` pairs loaded from disk;
    whatever is missing is trained here. Retrain models are memoized in-process.
    """
    split = build_split(values, seed)
    net_cfg = net_config(values)
    tc = train_config(values, seed)
    t = time.perf_counter()
    if original is None:
        original = train_original(train_set(split), net_cfg, tc)
    t_orig = time.perf_counter() - t
    key = retrain_key(values, split)
    t = time.perf_counter()
    if retrain_model is not None:
        _RETRAIN_CACHE[key] = retrain_model
    elif key not in _RETRAIN_CACHE:
        _RETRAIN_CACHE[key] = retrain(split.retain, net_cfg, tc)
    t_retrain = time.perf_counter() - t
    pr, cr = _RETRAIN_CACHE[key]
    params0, cfg0 = original
    sets = make_eval_sets(split, seed)
    return Workbench(values, seed, split, params0, cfg0, evaluate(pr, cr, split, sets),
                     evaluate(params0, cfg0, split, sets), sets,
                     {"original": t_orig, "retrain": t_retrain}, (pr, cr))


def train_set(split: Split) -> LabeledSet:
    f, r = split.forget, split.retain
    rows = np.argsort(np.concatenate([f.indices, r.indices]), kind="stable")
    return LabeledSet(np.vstack([f.features, r.features])[rows],
                      np.concatenate([f.labels, r.labels])[rows], f.n_classes,
                      np.concatenate([f.indices, r.indices])[rows], "train")


def run_method(wb: Workbench, method: str, **overrides) -> dict:
    """Run one method on a prepared workbench; returns the report payload."""
    ucfg = unlearn_config(wb.values, wb.seed, method)
    if overrides:
        ucfg = replace(ucfg, **overrides)
    t = time.perf_counter()
    if method == "retrain":
        params, cfg = wb.retrain_model
        trace = None
        raw = dict(wb.retrain_raw)
        elapsed = wb.timings["retrain"]
    else:
        params, trace = unlearn(wb.params0, wb.cfg0, wb.split.forget, wb.split.retain, ucfg)
        cfg = wb.cfg0
        raw = evaluate(params, cfg, wb.split, wb.eval_sets)
        elapsed = time.perf_counter() - t
    report = average_gap(raw, wb.retrain_raw)
    return {
        "method": method,
        "seed": wb.seed,
        "config_hash": config_hash(wb.values),
        "version": __version__,
        "mia_convention": MIA_CONVENTION,
        "raw": raw,
        "retrain_raw": wb.retrain_raw,
        "original_raw": wb.original_raw,
        "metrics": report.to_dict(),
        "forget_entropy": mean_entropy(params, wb.split.forget.features, cfg),
        "forget_entropy_original": mean_entropy(wb.params0, wb.split.forget.features, wb.cfg0),
        "wall_clock": elapsed,
        "steps": len(trace) if trace is not None else 0,
        "config": dump_config(wb.values),
        "_params": params,
        "_trace": trace,
    }
