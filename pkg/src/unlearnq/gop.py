"""Orthogonal projection of the forgetting gradient against the retain gradient.

Two flavours: a global projection over the flattened parameter vector, and
a layer-wise one that normalizes each unit (every weight matrix and every
bias vector separately), projects, and rescales back to the original
forgetting-gradient norm of that unit. ``alpha`` interpolates between no
projection (0) and full orthogonalization (1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .net import GradientSet, Layer, ParameterSet, check_congruent

MODES = ("global", "layerwise")


@dataclass(frozen=True)
class ProjectionConfig:
    mode: str = "layerwise"
    alpha: float = 1.0
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"projection mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass
class ProjectionResult:
    grads: GradientSet
    # names of units passed through because the retain gradient vanished there
    degenerate: list[str] = field(default_factory=list)


def project_global(g_f: GradientSet, g_r: GradientSet, alpha: float = 1.0,
                   epsilon: float = 1e-12) -> ProjectionResult:
    check_congruent(g_f, g_r)
    f, r = g_f.flatten(), g_r.flatten()
    rr = float(r @ r)
    if math.sqrt(rr) <= epsilon:
        return ProjectionResult(g_f.copy(), ["<global>"])
    coef = alpha * float(f @ r) / rr
    return ProjectionResult(g_f.unflatten(f - coef * r))


def _project_unit(f: np.ndarray, r: np.ndarray, alpha: float, eps: float):
    if alpha == 0.0:
        return f.copy(), False
    nf, nr = np.linalg.norm(f), np.linalg.norm(r)
    if nr <= eps:
        return f.copy(), True
    tf = f / (nf + eps)
    # nr > eps here, so the exact unit direction is safe; dividing r by (nr + eps)
    # would leave a residual of order eps / nr along r
    tr = r / nr
    perp = tf - alpha * float(np.vdot(tf, tr)) * tr
    return perp * nf, False


def project_layerwise(g_f: GradientSet, g_r: GradientSet,
                      cfg: ProjectionConfig = ProjectionConfig()) -> ProjectionResult:
    check_congruent(g_f, g_r)
    degenerate = []
    layers = []
    for lf, lr in zip(g_f.layers, g_r.layers):
        w, dw = _project_unit(lf.weights, lr.weights, cfg.alpha, cfg.epsilon)
        b, db = _project_unit(lf.bias, lr.bias, cfg.alpha, cfg.epsilon)
        if dw:
            degenerate.append(f"{lf.name}.weights")
        if db:
            degenerate.append(f"{lf.name}.bias")
        layers.append(Layer(lf.name, w, b))
    return ProjectionResult(ParameterSet(layers), degenerate)


def project(g_f: GradientSet, g_r: GradientSet, cfg: ProjectionConfig) -> ProjectionResult:
    if cfg.mode == "global":
        return project_global(g_f, g_r, cfg.alpha, cfg.epsilon)
    return project_layerwise(g_f, g_r, cfg)


def _cos(dot: float, na: float, nb: float) -> tuple[float, bool]:
    if na == 0.0 or nb == 0.0:
        return 0.0, True
    return max(-1.0, min(1.0, dot / (na * nb))), False


@dataclass
class ConflictDiagnostics:
    units: list[str]
    cosines: list[float]
    inner: list[float]
    norm_f: list[float]
    norm_r: list[float]
    # flattened quantities
    cosine: float
    angle: float
    inner_f_perp: float
    sin2_identity: float
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "units": self.units,
            "cosines": self.cosines,
            "inner": self.inner,
            "norm_f": self.norm_f,
            "norm_r": self.norm_r,
            "cosine": self.cosine,
            "angle": self.angle,
            "inner_f_perp": self.inner_f_perp,
            "sin2_identity": self.sin2_identity,
            "degenerate": self.degenerate,
        }


def diagnostics(g_f: GradientSet, g_r: GradientSet) -> ConflictDiagnostics:
    """Per-unit conflict geometry plus the flattened forgetting-effectiveness identity.

    ``inner_f_perp`` is ``<g_f, g_f_perp>`` for the full global projection and
    ``sin2_identity`` its closed form ``|g_f|^2 sin^2(phi)``.
    """
    check_congruent(g_f, g_r)
    names, cosines, inner, nfs, nrs = [], [], [], [], []
    for (name, a), (_, b) in zip(g_f.units(), g_r.units()):
        d = float(np.vdot(a, b))
        na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
        names.append(name)
        inner.append(d)
        nfs.append(na)
        nrs.append(nb)
        cosines.append(_cos(d, na, nb)[0])
    f, r = g_f.flatten(), g_r.flatten()
    nf, nr = float(np.linalg.norm(f)), float(np.linalg.norm(r))
    cos, degenerate = _cos(float(f @ r), nf, nr)
    if nr > 0:
        perp = f - (float(f @ r) / float(r @ r)) * r
    else:
        perp = f.copy()
    return ConflictDiagnostics(
        units=names,
        cosines=cosines,
        inner=inner,
        norm_f=nfs,
        norm_r=nrs,
        cosine=cos,
        angle=math.acos(cos),
        inner_f_perp=float(f @ perp),
        sin2_identity=nf * nf * (1.0 - cos * cos),
        degenerate=degenerate,
    )


def unit_inner(a: GradientSet, b: GradientSet) -> list[float]:
    check_congruent(a, b)
    return [float(np.vdot(x, y)) for (_, x), (_, y) in zip(a.units(), b.units())]
