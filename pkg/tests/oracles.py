"""Independent reference computations used by the tests.

Nothing here calls the package's backprop; forward passes are written out
directly so gradients can be checked by central differences.
"""

from fractions import Fraction

import numpy as np

from unlearnq.quant import quantize


def ref_forward(params, x, widths, w_offsets=None, a_offsets=None):
    """Plain MLP forward. Offsets are added to weights / layer inputs as constants.

    With offsets equal to ``q(v0) - v0`` frozen at a base point, this is the
    network with every quantizer replaced by identity (derivative 1) while
    reproducing the quantized forward values at that base point.
    """
    h = np.asarray(x, dtype=np.float64)
    n = len(widths) - 1
    for l, layer in enumerate(params.layers):
        a = h if a_offsets is None else h + a_offsets[l]
        w = layer.weights if w_offsets is None else layer.weights + w_offsets[l]
        z = a @ w + layer.bias
        h = z if l == n - 1 else np.maximum(z, 0.0)
    return h


def quant_offsets(params, x, cfg):
    """Frozen ``q(v) - v`` offsets for weights and layer inputs of a quantized net."""
    w_off, a_off = [], []
    h = np.asarray(x, dtype=np.float64)
    for l, layer in enumerate(params.layers):
        aspec, wspec = cfg.act_spec(l), cfg.weight_spec(l)
        a = quantize(h, aspec)[0] if aspec else h
        w = quantize(layer.weights, wspec)[0] if wspec else layer.weights
        a_off.append(a - h)
        w_off.append(w - layer.weights)
        z = a @ w + layer.bias
        h = z if l == cfg.n_layers - 1 else np.maximum(z, 0.0)
    return w_off, a_off


def ref_loss(logits, y, kind):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    if kind == "forget_entropy":
        return float(np.mean(np.sum(np.exp(logp) * logp, axis=1)))
    ce = -logp[np.arange(len(y)), y]
    return float(ce.mean()) if kind == "retain_ce" else -float(ce.mean())


def central_difference(f, params, coords, h=1e-6):
    """d f / d theta at the listed flat coordinates."""
    flat = params.flatten()
    out = []
    for i in coords:
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        out.append((f(params.unflatten(up)) - f(params.unflatten(dn))) / (2 * h))
    return np.array(out)


def rel_err(a, b, floor=1e-7):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def brute_force_threshold(members, nonmembers):
    """Scan every candidate threshold with explicit loops; earliest best wins.

    Balanced accuracy is kept as an exact fraction so ties compare exactly.
    """
    pooled = sorted(set(list(members) + list(nonmembers)))
    cands = [-np.inf] + [(pooled[i] + pooled[i + 1]) / 2 for i in range(len(pooled) - 1)] + [np.inf]
    best_t, best_ba = None, Fraction(-1)
    for t in cands:
        tp = Fraction(sum(1 for m in members if m >= t), len(members))
        tn = Fraction(sum(1 for v in nonmembers if v < t), len(nonmembers))
        ba = (tp + tn) / 2
        if ba > best_ba:
            best_t, best_ba = t, ba
    return best_t, float(best_ba)
