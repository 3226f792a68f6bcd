"""A small ReLU MLP with optional fake-quantized weights and activations.

Weights are stored as ``(fan_in, fan_out)`` so a layer computes
``z = q(a) @ q(W) + b``. Biases are never quantized. Gradients are computed
by manual layer-wise backprop; quantize nodes pass gradient straight
through inside their clamp range and block it outside.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .quant import QuantSpec, calibrate_scale, quantize, ste_backward

LOSS_KINDS = ("retain_ce", "forget_entropy", "negated_ce")


@dataclass
class Layer:
    name: str
    weights: np.ndarray
    bias: np.ndarray


@dataclass
class ParameterSet:
    """Ordered per-layer arrays. Also used for gradients (a GradientSet)."""

    layers: list[Layer]

    def copy(self) -> "ParameterSet":
        return ParameterSet([Layer(l.name, l.weights.copy(), l.bias.copy()) for l in self.layers])

    def units(self) -> list[tuple[str, np.ndarray]]:
        """Projection units in a fixed order: each weight then its bias."""
        out = []
        for l in self.layers:
            out.append((f"{l.name}.weights", l.weights))
            out.append((f"{l.name}.bias", l.bias))
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for _, a in self.units()])

    def unflatten(self, flat: np.ndarray) -> "ParameterSet":
        """Build a congruent set from a flat vector (inverse of ``flatten``)."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"expected {self.size} values, got {flat.size}")
        layers, pos = [], 0
        for l in self.layers:
            nw, nb = l.weights.size, l.bias.size
            w = flat[pos:pos + nw].reshape(l.weights.shape).copy()
            pos += nw
            b = flat[pos:pos + nb].reshape(l.bias.shape).copy()
            pos += nb
            layers.append(Layer(l.name, w, b))
        return ParameterSet(layers)

    @property
    def size(self) -> int:
        return sum(a.size for _, a in self.units())

    def map_units(self, fn) -> "ParameterSet":
        return ParameterSet([Layer(l.name, fn(l.weights), fn(l.bias)) for l in self.layers])

    def zip_units(self, other: "ParameterSet", fn) -> "ParameterSet":
        check_congruent(self, other)
        return ParameterSet(
            [Layer(a.name, fn(a.weights, b.weights), fn(a.bias, b.bias))
             for a, b in zip(self.layers, other.layers)]
        )

    def __add__(self, other):
        return self.zip_units(other, np.add)

    def __sub__(self, other):
        return self.zip_units(other, np.subtract)

    def scaled(self, c: float) -> "ParameterSet":
        return self.map_units(lambda a: c * a)

    def all_finite(self) -> bool:
        return all(np.isfinite(a).all() for _, a in self.units())

    def equal(self, other: "ParameterSet") -> bool:
        """Bit-exact equality."""
        if len(self.layers) != len(other.layers):
            return False
        return all(
            a.name == b.name and np.array_equal(x, y)
            for (a, b) in zip(self.layers, other.layers)
            for x, y in ((a.weights, b.weights), (a.bias, b.bias))
        )


GradientSet = ParameterSet


def check_congruent(a: ParameterSet, b: ParameterSet) -> None:
    if len(a.layers) != len(b.layers):
        raise ValueError(f"layer count mismatch: {len(a.layers)} vs {len(b.layers)}")
    for la, lb in zip(a.layers, b.layers):
        if la.weights.shape != lb.weights.shape or la.bias.shape != lb.bias.shape:
            raise ValueError(f"shape mismatch in layer {la.name!r}")


@dataclass(frozen=True)
class NetConfig:
    widths: tuple[int, ...]
    activation: str = "relu"
    weight_bits: Optional[int] = None
    act_bits: Optional[int] = None
    # per-layer scales, filled in by calibrate()
    weight_scales: Optional[tuple[float, ...]] = None
    act_scales: Optional[tuple[float, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("widths needs at least input and output sizes")
        if self.widths[-1] < 2:
            raise ValueError("class count (last width) must be >= 2")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        for name in ("weight_scales", "act_scales"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, tuple(float(s) for s in v))
                if len(v) != self.n_layers:
                    raise ValueError(f"{name} needs {self.n_layers} entries")

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def calibrated(self) -> bool:
        return (self.weight_bits is None or self.weight_scales is not None) and (
            self.act_bits is None or self.act_scales is not None
        )

    def weight_spec(self, l: int) -> Optional[QuantSpec]:
        if self.weight_bits is None or self.weight_scales is None:
            return None
        return QuantSpec(self.weight_bits, self.weight_scales[l])

    def act_spec(self, l: int) -> Optional[QuantSpec]:
        if self.act_bits is None or self.act_scales is None:
            return None
        return QuantSpec(self.act_bits, self.act_scales[l])

    def full_precision(self) -> "NetConfig":
        return replace(self, weight_bits=None, act_bits=None, weight_scales=None, act_scales=None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        for k in ("weight_scales", "act_scales"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


def init_params(cfg: NetConfig, seed: int) -> ParameterSet:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for l, (fi, fo) in enumerate(zip(cfg.widths[:-1], cfg.widths[1:])):
        a = np.sqrt(6.0 / (fi + fo))
        layers.append(Layer(f"fc{l}", rng.uniform(-a, a, size=(fi, fo)), np.zeros(fo)))
    return ParameterSet(layers)


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(z).all():
        raise ValueError("softmax got non-finite logits")
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _check_input(params: ParameterSet, x, cfg: NetConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"input must be a [batch, features] matrix, got shape {x.shape}")
    if x.shape[1] != cfg.widths[0]:
        raise ValueError(f"feature dim {x.shape[1]} does not match widths[0]={cfg.widths[0]}")
    if len(params.layers) != cfg.n_layers:
        raise ValueError(f"params have {len(params.layers)} layers, config expects {cfg.n_layers}")
    for l, layer in enumerate(params.layers):
        want = (cfg.widths[l], cfg.widths[l + 1])
        if layer.weights.shape != want or layer.bias.shape != (want[1],):
            raise ValueError(f"layer {layer.name!r} has shape {layer.weights.shape}, expected {want}")
    if not np.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    return x


def _forward(params: ParameterSet, x: np.ndarray, cfg: NetConfig):
    """Forward pass keeping what backprop needs."""
    cache = []
    h = x
    last = cfg.n_layers - 1
    for l, layer in enumerate(params.layers):
        aspec, wspec = cfg.act_spec(l), cfg.weight_spec(l)
        a, amask = quantize(h, aspec) if aspec else (h, None)
        w, wmask = quantize(layer.weights, wspec) if wspec else (layer.weights, None)
        z = a @ w + layer.bias
        cache.append((a, amask, w, wmask, z))
        h = z if l == last else np.maximum(z, 0.0)
    return h, cache


def forward(params: ParameterSet, x, cfg: NetConfig) -> np.ndarray:
    x = _check_input(params, x, cfg)
    logits, _ = _forward(params, x, cfg)
    return logits


def predict_proba(params: ParameterSet, x, cfg: NetConfig) -> np.ndarray:
    return softmax(forward(params, x, cfg))


def grad(params: ParameterSet, x, y, loss_kind: str, cfg: NetConfig) -> tuple[float, GradientSet]:
    """Mean batch loss and its gradient w.r.t. the latent parameters."""
    from .losses import logits_loss

    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    x = _check_input(params, x, cfg)
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    logits, cache = _forward(params, x, cfg)
    loss, dz = logits_loss(loss_kind, logits, y)

    grads = [None] * cfg.n_layers
    for l in range(cfg.n_layers - 1, -1, -1):
        a, amask, w, wmask, z = cache[l]
        if l != cfg.n_layers - 1:
            dz = dz * (z > 0)
        dw = a.T @ dz
        if wmask is not None:
            dw = ste_backward(dw, wmask)
        grads[l] = Layer(params.layers[l].name, dw, dz.sum(axis=0))
        if l > 0:
            dz = dz @ w.T
            if amask is not None:
                dz = ste_backward(dz, amask)
    return loss, ParameterSet(grads)


def calibrate(params: ParameterSet, x_calib, cfg: NetConfig) -> NetConfig:
    """Fix per-layer min-max scales from trained weights and one calibration batch."""
    wscales = None
    if cfg.weight_bits is not None:
        wscales = tuple(calibrate_scale(l.weights, cfg.weight_bits) for l in params.layers)
    ascales = None
    if cfg.act_bits is not None:
        x = _check_input(params, x_calib, cfg.full_precision())
        staged = replace(cfg, weight_scales=wscales, act_scales=None)
        ascales = []
        h = x
        for l, layer in enumerate(params.layers):
            s = calibrate_scale(h, cfg.act_bits)
            ascales.append(s)
            a, _ = quantize(h, QuantSpec(cfg.act_bits, s))
            wspec = staged.weight_spec(l)
            w = quantize(layer.weights, wspec)[0] if wspec else layer.weights
            h = np.maximum(a @ w + layer.bias, 0.0)
        ascales = tuple(ascales)
    return replace(cfg, weight_scales=wscales, act_scales=ascales)


# -- checkpoint file ---------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"UNLQCKPT"
#   uint32    format version (1)
#   uint32    header length H in bytes
#   H bytes   UTF-8 JSON: {"config": NetConfig dict, "layers": [{"name", "weights_shape", "bias_shape"}], "meta": {...}}
#   then for each layer in order: weights (row-major) then bias, as <f8

CKPT_MAGIC = b"UNLQCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, params: ParameterSet, cfg: NetConfig, meta: Optional[dict] = None) -> Path:
    path = Path(path)
    header = {
        "config": cfg.to_dict(),
        "layers": [
            {"name": l.name, "weights_shape": list(l.weights.shape), "bias_shape": list(l.bias.shape)}
            for l in params.layers
        ],
        "meta": meta or {},
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(hb)), hb]
    for l in params.layers:
        chunks.append(np.ascontiguousarray(l.weights, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[ParameterSet, NetConfig, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    layers = []
    for spec in header["layers"]:
        arrs = []
        for shape in (spec["weights_shape"], spec["bias_shape"]):
            n = int(np.prod(shape))
            arrs.append(np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
            pos += 8 * n
        layers.append(Layer(spec["name"], *arrs))
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes")
    return ParameterSet(layers), NetConfig.from_dict(header["config"]), header["meta"]
