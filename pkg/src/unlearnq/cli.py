"""Command-line experiment runner.

Layout under ``run.out`` (``--out``)::

    <model_key>/seed<N>/original.ckpt        original model (cmd: train)
    <model_key>/seed<N>/retrain.ckpt         Retrain reference, computed on first use
    <model_key>/seed<N>/<method>-<hash>.*    report .json/.csv, step trace .jsonl, .ckpt
    <model_key>/<cmd>-<hash>.csv / .txt      aggregate tables (compare, ablate)

``model_key`` hashes the data/split/net/quant/train settings, so unlearning
sweeps over ``unlearn.*`` keys share one original and one Retrain model.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

from . import __version__
from .experiment import (
    ConfigError, build_split, config_hash, dump_config, model_key, net_config, override,
    parse_config, prepare, run_method, train_config, train_set,
)
from .metrics import METRIC_KEYS, _atomic_write, average_gap, csv_row, evaluate, write_report
from .net import load_checkpoint, save_checkpoint
from .unlearner import ABLATIONS, METHODS, UnlearnError, retrain, train_original

log = logging.getLogger("unlearnq")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 2, 3
DEFAULT_COMPARE = ("oeu", "ft", "ga", "rl")


class RunFailure(RuntimeError):
    pass


# -- configuration -------------------------------------------------------------


def load_values(args) -> dict:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as e:
            raise ConfigError(f"{args.config}: {e.strerror}") from None
    values = parse_config(text)
    flags = {
        "unlearn.alpha": args.alpha,
        "unlearn.beta": args.beta,
        "quant.weight_bits": args.bits,
        "quant.act_bits": args.bits,
        "run.out": args.out,
    }
    if args.seeds is not None:
        flags["run.seeds"] = args.seeds
    elif args.seed is not None:
        flags["run.seeds"] = str(args.seed)
    for key, raw in flags.items():
        if raw is not None:
            values = override(values, key, str(raw))
    return values


def parse_methods(raw: Optional[str], default) -> list[str]:
    methods = [m.strip() for m in raw.split(",") if m.strip()] if raw else list(default)
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown method {', '.join(bad) or '(none)'}; valid methods: {', '.join(METHODS)}")
    return methods


# -- paths and cached models -----------------------------------------------------


def seed_dir(values: dict, seed: int) -> Path:
    return Path(values["run.out"]) / model_key(values) / f"seed{seed}"


def _write_jsonl(path: Path, records) -> None:
    _atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def train_cached(values: dict, seed: int, which: str, must_exist: bool = False):
    """Load ``<which>.ckpt`` for this seed, training and saving it first if absent."""
    d = seed_dir(values, seed)
    path = d / f"{which}.ckpt"
    if path.exists():
        params, cfg, _ = load_checkpoint(path)
        return params, cfg, path
    if must_exist:
        raise RunFailure(f"missing checkpoint {path}; run 'unlearnq train' with the same config first")
    split = build_split(values, seed)
    data = train_set(split) if which == "original" else split.retain
    history: list = []
    fit = train_original if which == "original" else retrain
    params, cfg = fit(data, net_config(values), train_config(values, seed), history)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"kind": which, "seed": seed, "model_key": model_key(values), "version": __version__,
            "config": dump_config(values, skip=("run.seeds", "run.out"))}
    save_checkpoint(path, params, cfg, meta)
    _write_jsonl(d / f"{which}_train.jsonl", history)
    return params, cfg, path


# -- single runs -------------------------------------------------------------------


def _public(payload: dict) -> dict:
    return {k: v for k, v in payload.items() if not k.startswith("_")}


def run_one(values: dict, seed: int, method: str, need_original: bool = False) -> dict:
    """Run ``method`` for one seed, write its report files, return the public payload."""
    values = override(values, "unlearn.method", method)
    p0, c0, _ = train_cached(values, seed, "original", must_exist=need_original)
    pr, cr, _ = train_cached(values, seed, "retrain")
    wb = prepare(values, seed, original=(p0, c0), retrain_model=(pr, cr))
    payload = run_method(wb, method)
    chash = config_hash(values)
    stem = f"{method}-{chash}"
    d = seed_dir(values, seed)
    if payload["_trace"] is not None:
        _write_jsonl(d / f"{stem}.trace.jsonl", payload["_trace"].records)
        save_checkpoint(d / f"{stem}.ckpt", payload["_params"], wb.cfg0,
                        {"kind": method, "seed": seed, "config_hash": chash, "version": __version__})
    report = average_gap(payload["raw"], payload["retrain_raw"])
    row = csv_row(report, method, seed, chash, payload["wall_clock"])
    public = _public(payload)
    jpath, _ = write_report(d, stem, public, row)
    public["report_path"] = str(jpath)
    return public


def _run_safe(job):
    values, seed, method = job
    try:
        return {"ok": True, "seed": seed, "method": method, "payload": run_one(values, seed, method)}
    except (UnlearnError, RunFailure, ValueError, OSError) as e:
        return {"ok": False, "seed": seed, "method": method, "error": str(e)}


def _threads() -> int:
    raw = os.environ.get("UNLEARNQ_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"UNLEARNQ_THREADS: expected an integer, got {raw!r}") from None


def run_many(values: dict, methods: list[str], seeds: list[int]) -> list[dict]:
    # originals and retrains are produced first, serially, so workers only read them
    for seed in seeds:
        train_cached(values, seed, "original")
        train_cached(values, seed, "retrain")
    jobs = [(values, s, m) for s in seeds for m in methods]
    workers = min(_threads(), len(jobs))
    if workers <= 1:
        return [_run_safe(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_safe, jobs))


# -- aggregation -------------------------------------------------------------------


AGG_KEYS = ("fa", "ra", "ta", "mia", "ag")


def _mean_sd(xs: list[float]) -> tuple[float, float]:
    if not xs:
        return float("nan"), float("nan")
    return statistics.fmean(xs), statistics.stdev(xs) if len(xs) > 1 else 0.0


def aggregate(results: list[dict], methods: list[str]) -> list[dict]:
    rows = []
    for m in methods:
        ok = [r["payload"] for r in results if r["method"] == m and r["ok"]]
        failed = [r for r in results if r["method"] == m and not r["ok"]]
        row = {"method": m, "n": len(ok), "failed": len(failed),
               "errors": "; ".join(f"seed {r['seed']}: {r['error']}" for r in failed)}
        for k in AGG_KEYS:
            row[f"{k}_mean"], row[f"{k}_std"] = _mean_sd([p["metrics"][k] for p in ok])
        for k in METRIC_KEYS:
            row[f"gap_{k}_mean"], _ = _mean_sd([p["metrics"]["gaps"][k] for p in ok])
        rows.append(row)
    scored = [r for r in rows if r["n"] > 0 and r["method"] != "retrain"]
    best = min((r["ag_mean"] for r in scored), default=None)
    for r in rows:
        r["best"] = best is not None and r in scored and r["ag_mean"] == best
    return rows


TABLE_COLUMNS = ("method", "n", "failed",
                 *[f"{k}_{s}" for k in AGG_KEYS for s in ("mean", "std")],
                 *[f"gap_{k}_mean" for k in METRIC_KEYS], "best", "errors")


def table_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=TABLE_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in TABLE_COLUMNS})
    return buf.getvalue()


def table_text(rows: list[dict]) -> str:
    head = ["method", "n"] + [k.upper() for k in AGG_KEYS] + [f"d{k.upper()}" for k in METRIC_KEYS]
    body = []
    for r in rows:
        cells = [r["method"] + (" *" if r["best"] else ""), str(r["n"])]
        cells += [f"{r[f'{k}_mean']:.2f} ± {r[f'{k}_std']:.2f}" for k in AGG_KEYS]
        cells += [f"{r[f'gap_{k}_mean']:.2f}" for k in METRIC_KEYS]
        if r["failed"]:
            cells[0] += f" [FAILED x{r['failed']}]"
        body.append(cells)
    widths = [max(len(row[i]) for row in [head, *body]) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [head, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    notes = ["* lowest mean AG (gaps are |method - retrain|)"]
    notes += [f"{r['method']}: {r['errors']}" for r in rows if r["failed"]]
    return "\n".join(lines + [""] + notes) + "\n"


# -- commands ------------------------------------------------------------------------


def cmd_train(args) -> int:
    values = load_values(args)
    for seed in values["run.seeds"]:
        _, _, path = train_cached(values, seed, "original")
        print(path)
    return EXIT_OK


def cmd_unlearn(args) -> int:
    values = load_values(args)
    method = parse_methods(args.method or values["unlearn.method"], ())[0]
    for seed in values["run.seeds"]:
        payload = run_one(values, seed, method, need_original=True)
        m = payload["metrics"]
        print(f"{payload['report_path']}  " + "  ".join(f"{k}={m[k]:.2f}" for k in AGG_KEYS))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    values = load_values(args)
    for seed in values["run.seeds"]:
        if args.checkpoint:
            params, cfg, _ = load_checkpoint(args.checkpoint)
        else:
            params, cfg, _ = train_cached(values, seed, "original", must_exist=True)
        pr, cr, _ = train_cached(values, seed, "retrain")
        wb = prepare(values, seed, original=(params, cfg), retrain_model=(pr, cr))
        raw = evaluate(params, cfg, wb.split, wb.eval_sets)
        rep = average_gap(raw, wb.retrain_raw)
        print(json.dumps({"seed": seed, "config_hash": config_hash(values), "version": __version__,
                          "raw": raw, "retrain_raw": wb.retrain_raw, "metrics": rep.to_dict()},
                         sort_keys=True))
    return EXIT_OK


def _aggregate_cmd(args, name: str, default_methods) -> int:
    values = load_values(args)
    methods = parse_methods(args.method, default_methods)
    results = run_many(values, methods, values["run.seeds"])
    rows = aggregate(results, methods)
    base = Path(values["run.out"]) / model_key(values)
    base.mkdir(parents=True, exist_ok=True)
    stem = f"{name}-{config_hash(values)}"
    _atomic_write(base / f"{stem}.csv", table_csv(rows))
    text = table_text(rows)
    _atomic_write(base / f"{stem}.txt", text)
    print(text, end="")
    print(base / f"{stem}.csv")
    return EXIT_RUN if any(r["failed"] for r in rows) else EXIT_OK


def cmd_compare(args) -> int:
    return _aggregate_cmd(args, "compare", DEFAULT_COMPARE)


def cmd_ablate(args) -> int:
    return _aggregate_cmd(args, "ablate", ("oeu", *ABLATIONS))


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat 'section.key = value' config file")
    common.add_argument("--method", metavar="NAME", help=f"one of {', '.join(METHODS)} (comma list for compare/ablate)")
    seeds = common.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, metavar="N")
    seeds.add_argument("--seeds", metavar="CSV", help="comma-separated seeds, e.g. 0,1,2")
    common.add_argument("--out", metavar="DIR", help="output directory (run.out)")
    common.add_argument("--alpha", help="orthogonality strength in [0, 1] (unlearn.alpha)")
    common.add_argument("--beta", help="retain weight (unlearn.beta)")
    common.add_argument("--bits", help="weight and activation bit width, 0 = full precision")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="unlearnq", description="Quantized machine-unlearning experiments.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the original model and write a checkpoint")
    sub.add_parser("unlearn", parents=[common], help="run one method against the Retrain reference")
    ev = sub.add_parser("evaluate", parents=[common], help="metrics of a checkpoint against Retrain")
    ev.add_argument("--checkpoint", metavar="PATH", help="defaults to the seed's original model")
    sub.add_parser("compare", parents=[common], help="several methods over several seeds")
    sub.add_parser("ablate", parents=[common], help="oeu and its ablations over several seeds")
    return parser


COMMANDS = {"train": cmd_train, "unlearn": cmd_unlearn, "evaluate": cmd_evaluate,
            "compare": cmd_compare, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (UnlearnError, RunFailure, ValueError, OSError) as e:
        print(f"run failed: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
