"""Training and unlearning drivers.

``train_original`` / ``retrain`` fit a model from scratch (full precision
first, then min-max calibration and a short quantization-aware phase when
the config asks for quantization). The unlearners start from a trained
model and run plain SGD, one record per optimization step in the trace.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .data import LabeledSet
from .gop import ProjectionConfig, diagnostics, project, unit_inner
from .losses import entropy, logits_loss
from .net import NetConfig, ParameterSet, calibrate, forward, grad, init_params, softmax

log = logging.getLogger(__name__)

METHODS = ("oeu", "ft", "ga", "rl", "retrain", "oeu_no_gop", "oeu_no_egu", "oeu_global")
BASELINES = ("ft", "ga", "rl")
ABLATIONS = ("oeu_no_gop", "oeu_no_egu", "oeu_global")


class UnlearnError(RuntimeError):
    """A run diverged or was given unusable inputs. ``trace`` holds what ran."""

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    lr: float = 0.1
    batch_size: int = 32
    cosine: bool = True
    seed: int = 0
    # quantization-aware epochs after calibration (only used when quantizing)
    qat_epochs: int = 10
    calib_size: int = 256

    def __post_init__(self):
        if self.epochs < 0 or self.qat_epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr <= 0 or self.batch_size < 1:
            raise ValueError("lr must be positive and batch_size >= 1")


@dataclass(frozen=True)
class UnlearnConfig:
    method: str = "oeu"
    epochs: int = 10
    lr: float = 0.01
    batch_size: Optional[int] = 32  # None: full-batch steps
    cosine: bool = False
    beta: float = 1.0
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; valid methods: {', '.join(METHODS)}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


@dataclass
class RunTrace:
    method: str
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _lr_at(base: float, step: int, total: int, cosine: bool) -> float:
    if not cosine or total <= 1:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / total))


def _sgd(params: ParameterSet, g: ParameterSet, lr: float) -> ParameterSet:
    return params.zip_units(g, lambda p, d: p - lr * d)


def _fit(data: LabeledSet, params: ParameterSet, cfg: NetConfig, epochs: int, opt: TrainConfig,
         rng: np.random.Generator, history: Optional[list] = None, phase: str = "fp") -> ParameterSet:
    n = len(data)
    steps_per_epoch = math.ceil(n / opt.batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, opt.batch_size):
            rows = perm[start:start + opt.batch_size]
            loss, g = grad(params, data.features[rows], data.labels[rows], "retain_ce", cfg)
            if not (np.isfinite(loss) and g.all_finite()):
                raise UnlearnError(f"training diverged at step {step} (loss={loss})", history)
            params = _sgd(params, g, _lr_at(opt.lr, step, total, opt.cosine))
            losses.append(loss)
            step += 1
        if history is not None:
            history.append({"phase": phase, "epoch": epoch, "loss": float(np.mean(losses))})
    return params


def train_original(data: LabeledSet, net_cfg: NetConfig, opt: TrainConfig,
                   history: Optional[list] = None) -> tuple[ParameterSet, NetConfig]:
    """Train from a seeded initialization; returns the parameters and the calibrated config.

    If ``history`` is a list, one ``{"phase", "epoch", "loss"}`` record per epoch is appended.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.n_classes != net_cfg.n_classes:
        raise ValueError(f"data has {data.n_classes} classes, net outputs {net_cfg.n_classes}")
    rng = np.random.default_rng(opt.seed)
    params = init_params(net_cfg, opt.seed)
    fp_cfg = net_cfg.full_precision()
    params = _fit(data, params, fp_cfg, opt.epochs, opt, rng, history, "fp")
    if net_cfg.weight_bits is None and net_cfg.act_bits is None:
        return params, fp_cfg
    cfg = calibrate(params, data.features[: opt.calib_size], net_cfg)
    if opt.epochs > 0:
        params = _fit(data, params, cfg, opt.qat_epochs, replace(opt, lr=opt.lr * 0.1), rng, history, "qat")
    return params, cfg


def retrain(data_retain: LabeledSet, net_cfg: NetConfig, opt: TrainConfig,
            history: Optional[list] = None) -> tuple[ParameterSet, NetConfig]:
    """The gold-standard reference: the same recipe on the retain set only."""
    return train_original(data_retain, net_cfg, opt, history)


def _random_wrong_labels(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    return (y + rng.integers(1, k, size=len(y))) % k


def _check_sets(forget: LabeledSet, retain: LabeledSet):
    if len(forget) == 0:
        raise ValueError("forget set is empty")
    if len(retain) == 0:
        raise ValueError("retain set is empty")


def _run(params0: ParameterSet, cfg: NetConfig, forget: LabeledSet, retain: LabeledSet,
         ucfg: UnlearnConfig) -> tuple[ParameterSet, RunTrace]:
    _check_sets(forget, retain)
    method = ucfg.method
    pcfg = ucfg.projection
    if method == "oeu_no_gop":
        pcfg = replace(pcfg, alpha=0.0)
    elif method == "oeu_global":
        pcfg = replace(pcfg, mode="global")
    projecting = method in ("oeu", "oeu_no_gop", "oeu_no_egu", "oeu_global")

    rng = np.random.default_rng(ucfg.seed)
    k = cfg.n_classes
    nf, nr = len(forget), len(retain)
    bs = nf if ucfg.batch_size is None else ucfg.batch_size
    steps_per_epoch = math.ceil(nf / bs)
    total = ucfg.epochs * steps_per_epoch
    trace = RunTrace(method)
    params = params0.copy()
    t0 = time.perf_counter()
    step = 0
    for epoch in range(ucfg.epochs):
        fy = forget.labels
        if method in ("rl", "oeu_no_egu"):
            fy = _random_wrong_labels(forget.labels, k, rng)
        fperm = np.arange(nf) if ucfg.batch_size is None else rng.permutation(nf)
        for start in range(0, nf, bs):
            frows = fperm[start:start + bs]
            if ucfg.batch_size is None:
                rrows = np.arange(nr)
            else:
                rrows = rng.choice(nr, size=min(len(frows), nr), replace=False)
            xf, yf = forget.features[frows], fy[frows]
            xr, yr = retain.features[rrows], retain.labels[rrows]
            lr = _lr_at(ucfg.lr, step, total, ucfg.cosine)
            rec = {"step": step, "epoch": epoch, "lr": lr}

            if projecting:
                kind = "retain_ce" if method == "oeu_no_egu" else "forget_entropy"
                lf, g_f = grad(params, xf, yf, kind, cfg)
                lr_, g_r = grad(params, xr, yr, "retain_ce", cfg)
                g_r = g_r.scaled(ucfg.beta)
                res = project(g_f, g_r, pcfg)
                update = res.grads + g_r
                diag = diagnostics(g_f, g_r)
                rec.update(
                    cosine=diag.cosine,
                    inner=diag.inner,
                    inner_projected=unit_inner(res.grads, g_r),
                    inner_f_perp=diag.inner_f_perp,
                    conflict=float(np.sum(diag.inner)) < 0.0,
                    degenerate_units=res.degenerate,
                )
            elif method == "ga":
                lf, update = grad(params, xf, yf, "negated_ce", cfg)
                lr_ = logits_loss("retain_ce", forward(params, xr, cfg), yr)[0]
            elif method == "ft":
                lr_, update = grad(params, xr, yr, "retain_ce", cfg)
                lf = logits_loss("retain_ce", forward(params, xf, cfg), yf)[0]
            elif method == "rl":
                lf, g_f = grad(params, xf, yf, "retain_ce", cfg)
                lr_, g_r = grad(params, xr, yr, "retain_ce", cfg)
                update = g_f + g_r
            else:
                raise ValueError(f"method {method!r} is not an unlearner")

            if not (np.isfinite(lf) and np.isfinite(lr_) and update.all_finite()):
                log.warning("%s: aborting at step %d, non-finite loss or gradient", method, step)
                raise UnlearnError(f"{method}: non-finite loss or gradient at step {step}", trace)
            rec["forget_loss"] = float(lf)
            rec["retain_loss"] = float(lr_)
            rec["forget_entropy"] = float(np.mean(entropy(softmax(forward(params, xf, cfg)))))
            params = _sgd(params, update, lr)
            rec["wall_clock"] = time.perf_counter() - t0
            trace.records.append(rec)
            step += 1
    return params, trace


def run_oeu(params0, cfg, forget, retain, ucfg: UnlearnConfig):
    if ucfg.method != "oeu":
        raise ValueError(f"run_oeu needs method 'oeu', got {ucfg.method!r}")
    return _run(params0, cfg, forget, retain, ucfg)


def run_baseline(params0, cfg, forget, retain, ucfg: UnlearnConfig):
    if ucfg.method not in BASELINES:
        raise ValueError(f"run_baseline needs one of {BASELINES}, got {ucfg.method!r}")
    return _run(params0, cfg, forget, retain, ucfg)


def run_ablation(params0, cfg, forget, retain, ucfg: UnlearnConfig):
    if ucfg.method not in ABLATIONS:
        raise ValueError(f"run_ablation needs one of {ABLATIONS}, got {ucfg.method!r}")
    return _run(params0, cfg, forget, retain, ucfg)


def unlearn(params0, cfg, forget, retain, ucfg: UnlearnConfig):
    """Dispatch on ``ucfg.method`` (everything except ``retrain``)."""
    if ucfg.method == "retrain":
        raise ValueError("retrain does not start from the original model; call retrain()")
    return _run(params0, cfg, forget, retain, ucfg)
