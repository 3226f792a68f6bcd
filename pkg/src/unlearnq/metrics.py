"""Evaluation: FA/RA/TA accuracies, a confidence-threshold membership attack, and the average gap.

MIA convention: the attacker labels a sample *member* when its max-softmax
confidence is >= the fitted threshold. The reported MIA score is the
percentage of forget samples the attacker calls NON-member, so a higher
score means the forget set looks more like unseen data.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import LabeledSet, Split
from .net import NetConfig, ParameterSet, forward, predict_proba

METRIC_KEYS = ("fa", "ra", "ta", "mia")
MIA_CONVENTION = (
    "mia = 100 * fraction of forget samples the confidence-threshold attacker "
    "classifies as non-member (member iff max softmax >= threshold)"
)
CSV_COLUMNS = (
    "method", "seed", "config_hash", "fa", "ra", "ta", "mia", "ag",
    "gap_fa", "gap_ra", "gap_ta", "gap_mia", "wall_clock",
)


def accuracy(params: ParameterSet, data: LabeledSet, cfg: NetConfig) -> float:
    """Percentage of argmax-correct predictions; ties go to the lowest class index."""
    if len(data) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    pred = np.argmax(forward(params, data.features, cfg), axis=1)
    return 100.0 * float(np.mean(pred == data.labels))


def confidence(params: ParameterSet, x, cfg: NetConfig) -> np.ndarray:
    return predict_proba(params, x, cfg).max(axis=1)


def candidate_thresholds(values: np.ndarray) -> np.ndarray:
    """-inf, midpoints between consecutive distinct values, +inf."""
    u = np.unique(values)
    return np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])


def balanced_accuracy(members: np.ndarray, nonmembers: np.ndarray, t: float) -> float:
    tpr = np.mean(members >= t)
    tnr = np.mean(nonmembers < t)
    return 0.5 * (tpr + tnr)


def fit_threshold(members, nonmembers) -> tuple[float, float]:
    """Threshold with the highest balanced accuracy; earliest candidate wins ties."""
    members = np.sort(np.asarray(members, dtype=np.float64))
    nonmembers = np.sort(np.asarray(nonmembers, dtype=np.float64))
    cands = candidate_thresholds(np.concatenate([members, nonmembers]))
    nm, nn = len(members), len(nonmembers)
    tp = nm - np.searchsorted(members, cands, side="left")
    tn = np.searchsorted(nonmembers, cands, side="left")
    # integer score proportional to balanced accuracy, so ties are exact
    score = tp * nn + tn * nm
    best = int(np.argmax(score))
    return float(cands[best]), float(score[best]) / (2 * nm * nn)


@dataclass
class MIAResult:
    score: float
    threshold: float
    balanced_accuracy: float
    degenerate: bool = False


def mia_score(params: ParameterSet, forget: LabeledSet, test_heldout: LabeledSet,
              retain_probe: LabeledSet, cfg: NetConfig) -> MIAResult:
    for name, s in (("forget", forget), ("test_heldout", test_heldout), ("retain_probe", retain_probe)):
        if len(s) == 0:
            raise ValueError(f"MIA needs a nonempty {name} set")
    mem = confidence(params, retain_probe.features, cfg)
    non = confidence(params, test_heldout.features, cfg)
    if np.all(np.concatenate([mem, non]) == mem[0]):
        return MIAResult(50.0, float("nan"), 0.5, degenerate=True)
    t, ba = fit_threshold(mem, non)
    fconf = confidence(params, forget.features, cfg)
    return MIAResult(100.0 * float(np.mean(fconf < t)), t, ba)


def nonmember_rate(params: ParameterSet, data: LabeledSet, threshold: float, cfg: NetConfig) -> float:
    return 100.0 * float(np.mean(confidence(params, data.features, cfg) < threshold))


@dataclass
class EvalSets:
    """Fixed partition of the evaluation data shared by every method of a run."""

    test: LabeledSet
    attack_nonmember: LabeledSet
    attack_member: LabeledSet
    test_probe: LabeledSet  # the test half not used to fit the attacker


def make_eval_sets(split: Split, seed: int) -> EvalSets:
    if len(split.test) < 2:
        raise ValueError("need at least two test samples for the attack split")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(split.test))
    half = len(perm) // 2
    nonmem = split.test.subset(np.sort(perm[:half]), "attack_nonmember")
    probe = split.test.subset(np.sort(perm[half:]), "test_probe")
    m = min(len(split.retain), len(nonmem))
    mem = split.retain.subset(np.sort(rng.choice(len(split.retain), size=m, replace=False)), "attack_member")
    return EvalSets(split.test, nonmem, mem, probe)


def evaluate(params: ParameterSet, cfg: NetConfig, split: Split, sets: EvalSets) -> dict:
    """Raw FA/RA/TA/MIA for one model, plus attacker details."""
    mia = mia_score(params, split.forget, sets.attack_nonmember, sets.attack_member, cfg)
    out = {
        "fa": accuracy(params, split.forget, cfg),
        "ra": accuracy(params, split.retain, cfg),
        "ta": accuracy(params, sets.test, cfg),
        "mia": mia.score,
        "mia_threshold": mia.threshold,
        "mia_balanced_accuracy": mia.balanced_accuracy,
        "mia_degenerate": mia.degenerate,
    }
    if not mia.degenerate:
        out["mia_test_probe"] = nonmember_rate(params, sets.test_probe, mia.threshold, cfg)
    return out


@dataclass
class MetricsReport:
    fa: float
    ra: float
    ta: float
    mia: float
    ag: float
    gaps: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"fa": self.fa, "ra": self.ra, "ta": self.ta, "mia": self.mia, "ag": self.ag,
                "gaps": dict(self.gaps)}


def average_gap(method_raw: dict, retrain_raw: dict) -> MetricsReport:
    """Per-metric absolute gaps to the reference and their mean."""
    missing = [k for k in METRIC_KEYS if k not in method_raw or k not in retrain_raw]
    if missing:
        raise ValueError(f"missing metrics: {missing}")
    gaps = {k: abs(float(method_raw[k]) - float(retrain_raw[k])) for k in METRIC_KEYS}
    ag = sum(gaps.values()) / len(gaps)
    return MetricsReport(*(float(method_raw[k]) for k in METRIC_KEYS), ag=ag, gaps=gaps)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def csv_row(report: MetricsReport, method: str, seed: int, config_hash: str, wall_clock: float) -> dict:
    g = report.gaps
    return {
        "method": method, "seed": seed, "config_hash": config_hash,
        "fa": report.fa, "ra": report.ra, "ta": report.ta, "mia": report.mia, "ag": report.ag,
        "gap_fa": g["fa"], "gap_ra": g["ra"], "gap_ta": g["ta"], "gap_mia": g["mia"],
        "wall_clock": wall_clock,
    }


def write_report(out_dir, stem: str, payload: dict, row: dict) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and a one-row ``<stem>.csv``, each atomically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    _atomic_write(jpath, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerow(row)
    _atomic_write(cpath, buf.getvalue())
    return jpath, cpath
