"""Command-line entry point: ``fedsophia {run,sweep,quadratic-demo,gnb-check}``."""

import argparse
import csv
import itertools
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import config as configmod
from . import telemetry
from .errors import ConfigError
from .federation import rounds_to_fraction, run_experiment
from .models import Batch, PinnedLinearSoftmax
from .optimizers import QUADRATIC_METHODS, gauss_newton_diagonal, gnb_estimate, quadratic_demo

log = logging.getLogger("fedsophia")

METRICS_HEADER = ["round", "accuracy", "mean_loss", "e_comp_j", "e_tx_j", "bits", "seconds"]
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


def _fail(msg, code):
    print(f"fedsophia: error: {msg}", file=sys.stderr)
    return code


def metrics_row(rec):
    return [rec.round, rec.accuracy, rec.mean_loss, rec.e_comp_j, rec.e_tx_j, rec.bits, rec.seconds]


def _load_config(args):
    cfg = configmod.load(args.config) if args.config else configmod.ExperimentConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if args.workers is not None:
        overrides["workers"] = args.workers
    return cfg.with_overrides(**overrides) if overrides else cfg


def summarize(cfg, records, devices_ledgers=None, wall=0.0):
    final = records[-1]
    summary = {
        "algorithm": cfg.algorithm,
        "rounds": final.round,
        "final_accuracy": final.accuracy,
        "final_train_loss": final.mean_loss,
        "final_test_loss": final.test_loss,
        "rounds_to_90pct_of_final": rounds_to_fraction(records, 0.9),
        "wall_seconds": wall,
        "carbon_kg_per_mj": cfg.energy.carbon_kg_per_mj,
    }
    per_device = []
    for i, lg in enumerate(devices_ledgers or []):
        per_device.append({
            "device": i,
            "e_comp_j": lg.e_comp_j,
            "e_tx_j": lg.e_tx_j,
            "e_total_j": lg.e_total_j,
            "bits_sent": lg.bits_sent,
            "carbon_kg": telemetry.carbon(lg, cfg.energy.carbon_kg_per_mj),
        })
    tot = telemetry.total(devices_ledgers or [])
    summary["devices"] = per_device
    summary["aggregate"] = {
        "e_comp_j": tot.e_comp_j,
        "e_tx_j": tot.e_tx_j,
        "e_total_j": tot.e_total_j,
        "bits_sent": tot.bits_sent,
        "carbon_kg": telemetry.carbon(tot, cfg.energy.carbon_kg_per_mj),
    }
    return summary


def execute(cfg, out_dir, workers=None):
    """Run one experiment and write metrics.csv, summary.json, resolved-config.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "resolved-config.json", "w") as f:
        json.dump(cfg.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    records = []
    started = time.perf_counter()
    with open(out_dir / "metrics.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_HEADER)
        f.flush()

        def on_round(rec):
            records.append(rec)
            writer.writerow(metrics_row(rec))
            f.flush()

        run_experiment(cfg, workers=workers, on_round=on_round)
    wall = time.perf_counter() - started
    with open(out_dir / "summary.json", "w") as f:
        json.dump(summarize(cfg, records, records[-1].ledgers, wall), f, indent=2)
        f.write("\n")
    return records


def cmd_run(args):
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)
    out = Path(cfg.out)
    try:
        records = execute(cfg, out, workers=cfg.workers)
    except Exception as exc:  # partial metrics are already on disk
        log.debug("run failed", exc_info=True)
        return _fail(f"run failed: {exc} (partial metrics in {out / 'metrics.csv'})", EXIT_FAILED)
    print(f"final accuracy {records[-1].accuracy:.4f} after {records[-1].round} rounds; wrote {out}")
    return EXIT_OK


def _parse_value(text):
    text = text.strip()
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _flatten(table, prefix=""):
    out = {}
    for key, value in table.items():
        if isinstance(value, dict):
            out.update(_flatten(value, f"{prefix}{key}."))
        else:
            out[prefix + key] = value if isinstance(value, list) else [value]
    return out


def load_grid(path=None, params=()):
    """Grid blocks as a list of ``{dotted key: [values]}`` dicts.

    A grid file holds ``[[block]]`` tables; each block is expanded as a
    cross product and the blocks are concatenated. ``--param`` options form
    one extra block.
    """
    blocks = []
    if path:
        try:
            raw = configmod.tomllib.loads(Path(path).read_text())
        except (OSError, configmod.tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read grid {path}: {exc}") from None
        for block in raw.get("block", []):
            flat = _flatten(block)
            if flat:
                blocks.append(flat)
    extra = {}
    for item in params:
        if "=" not in item:
            raise ConfigError(f"--param expects key=v1,v2,..., got {item!r}")
        key, values = item.split("=", 1)
        vals = [_parse_value(v) for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"--param {key} has no values")
        extra[key.strip()] = vals
    if extra:
        blocks.append(extra)
    return blocks


def expand_grid(blocks):
    cells = []
    for block in blocks:
        keys = list(block)
        for combo in itertools.product(*(block[k] for k in keys)):
            cells.append(dict(zip(keys, combo)))
    return cells


def run_sweep(base, cells, out_dir, workers=None):
    """Run every cell; returns rows of ``(params, final accuracy, rounds to 90%, status)``."""
    keys = []
    for cell in cells:
        keys.extend(k for k in cell if k not in keys)
    rows = []
    for i, cell in enumerate(cells):
        row = {"cell": i, **{k: cell.get(k, "") for k in keys}}
        try:
            cfg = base.with_overrides(**cell)
            records = run_experiment(cfg, workers=workers or cfg.workers)
            row.update(final_accuracy=records[-1].accuracy,
                       rounds_to_90pct=rounds_to_fraction(records, 0.9), status="ok")
        except Exception as exc:
            row.update(final_accuracy="", rounds_to_90pct="", status=f"error: {exc}")
        log.info("sweep cell %d %s -> %s", i, cell, row["status"])
        rows.append(row)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "sweep.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, ["cell", *keys, "final_accuracy", "rounds_to_90pct", "status"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    with open(out_dir / "resolved-config.json", "w") as f:
        json.dump(base.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return rows


def cmd_sweep(args):
    try:
        base = _load_config(args)
        cells = expand_grid(load_grid(args.grid, args.param))
        if not cells:
            raise ConfigError("empty sweep grid; pass --grid FILE or --param key=v1,v2")
        for cell in cells:
            base.with_overrides(**cell)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_USAGE)
    rows = run_sweep(base, cells, base.out, workers=base.workers)
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        return _fail("every sweep cell failed", EXIT_FAILED)
    best = max(ok, key=lambda r: r["final_accuracy"])
    print(f"best cell {best['cell']}: accuracy {best['final_accuracy']:.4f}")
    return EXIT_OK


def cmd_quadratic_demo(args):
    try:
        rows = quadratic_demo(args.start, args.method, args.eta, args.max_steps)
    except ValueError as exc:
        return _fail(str(exc), EXIT_USAGE)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "trajectory.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["step", "theta1", "theta2", "f"])
        writer.writerows(rows)
    print(f"{'step':>5} {'theta1':>14} {'theta2':>14} {'f':>14}")
    for step, t1, t2, fval in rows:
        print(f"{step:>5} {t1:>14.6g} {t2:>14.6g} {fval:>14.6g}")
    return EXIT_OK


def gnb_check(draws=10_000, seed=0, n_features=3, n_samples=32):
    """Monte-Carlo mean of the GNB estimator vs the exact Gauss-Newton diagonal."""
    rng = np.random.default_rng(seed)
    model = PinnedLinearSoftmax(n_features)
    theta = rng.standard_normal(model.dim)
    x = rng.standard_normal((n_samples, n_features))
    batch = Batch(x, np.zeros(n_samples, dtype=np.int64))
    exact = gauss_newton_diagonal(model, theta, batch)
    mean = np.zeros(model.dim)
    for _ in range(draws):
        mean += gnb_estimate(model, theta, batch, rng)
    mean /= draws
    return exact, mean, np.abs(mean - exact) / exact


def cmd_gnb_check(args):
    exact, mean, rel = gnb_check(args.draws, args.seed if args.seed is not None else 0)
    print(f"{'coord':>5} {'exact':>14} {'gnb_mean':>14} {'rel_err':>10}")
    for j, (e, m, r) in enumerate(zip(exact, mean, rel)):
        print(f"{j:>5} {e:>14.6g} {m:>14.6g} {r:>10.4f}")
    ok = bool(np.all(rel <= args.tolerance))
    print(f"max relative error {rel.max():.4f} ({'within' if ok else 'exceeds'} {args.tolerance})")
    return EXIT_OK if ok else EXIT_FAILED


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config (TOML)")
    common.add_argument("--seed", type=int, help="master seed override")
    common.add_argument("--out", help="output directory override")
    common.add_argument("--workers", type=int, help="max devices trained in parallel")

    parser = argparse.ArgumentParser(prog="fedsophia", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one federated experiment")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="grid of experiments -> sweep.csv")
    p.add_argument("--grid", help="TOML file of [[block]] tables with value lists")
    p.add_argument("--param", action="append", default=[], metavar="KEY=V1,V2",
                   help="dotted config key and comma-separated values (repeatable)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("quadratic-demo", parents=[common], help="preconditioning demo on a 2-D quadratic")
    p.add_argument("--method", choices=QUADRATIC_METHODS, default="diag-newton")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=100)
    p.add_argument("--start", type=float, nargs=2, default=(1.0, 1.0))
    p.set_defaults(func=cmd_quadratic_demo)

    p = sub.add_parser("gnb-check", parents=[common], help="GNB estimator vs exact Gauss-Newton diagonal")
    p.add_argument("--draws", type=int, default=10_000)
    p.add_argument("--tolerance", type=float, default=0.05)
    p.set_defaults(func=cmd_gnb_check)
    return parser


def main(argv=None):
    level = os.environ.get("FEDSOPHIA_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
