"""Command-line front end.

Exit codes: 0 success, 2 input or config error, 3 statistical failure at run time.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, config, estimator, propensity
from .errors import BpsmError, ConfigError, DatasetError, ReplicationFailed
from .propensity import Dataset
from .simulation import REPLICATION_COLUMNS, REPORT_COLUMNS, run_study

log = logging.getLogger("bpsm")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3

ATT_FIELDS = ("method", "att", "se", "ci_lo", "ci_hi", "pct_matched_at_least_once")
MATCH_FREQUENCY_COLUMNS = ("unit", "z", "fraction")
PS_POSTERIOR_COLUMNS = ("unit", "z", "ps_mean", "ps_lo", "ps_hi")
DROP_KEEP_COLUMNS = ("unit", "z", "ps", "kept")


class InputError(Exception):
    """Bad input file; carries a message naming the offending column/row."""


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def read_dataset(path, outcome_type: str = "auto") -> Dataset:
    """Load a CSV with header ``id,z,y,x1..xp``; an intercept column is prepended.

    Raises ``InputError`` naming the offending column and (1-based data) row.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: cannot open ({exc.strerror})") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise InputError(f"{path}: empty file, header row required")
        header = [h.strip() for h in header]
        if header[:3] != ["id", "z", "y"]:
            raise InputError(f"{path}: header must start with columns id,z,y (got {','.join(header[:3])})")
        covs = header[3:]
        expected = [f"x{i}" for i in range(1, len(covs) + 1)]
        if covs != expected:
            bad = next(c for c, e in zip(covs, expected) if c != e)
            raise InputError(f"{path}: covariate columns must be named x1..x{len(covs)}; found '{bad}'")
        ids, z, y, X = [], [], [], []
        for r, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
            ids.append(row[0].strip())
            zv = row[1].strip()
            if zv not in ("0", "1"):
                raise InputError(f"{path}: row {r}, column 'z': must be 0 or 1 (got {zv!r})")
            z.append(int(zv))
            values = []
            for col, cell in zip(header[2:], row[2:]):
                try:
                    v = float(cell)
                except ValueError:
                    raise InputError(f"{path}: row {r}, column '{col}': not a number ({cell!r})") from None
                if not math.isfinite(v):
                    raise InputError(f"{path}: row {r}, column '{col}': value must be finite")
                values.append(v)
            y.append(values[0])
            X.append([1.0] + values[1:])
    if len(z) < 2:
        raise InputError(f"{path}: need at least two data rows")
    if sum(z) == 0:
        raise InputError(f"{path}: column 'z' has no treated units (z=1)")
    if sum(z) == len(z):
        raise InputError(f"{path}: column 'z' has no control units (z=0)")
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: column 'id' has duplicate values")
    y_arr = np.array(y)
    binary = bool(np.all((y_arr == 0) | (y_arr == 1)))
    if outcome_type == "auto":
        outcome_type = "binary" if binary else "continuous"
    elif outcome_type == "binary" and not binary:
        r = int(np.flatnonzero(~((y_arr == 0) | (y_arr == 1)))[0]) + 1
        raise InputError(f"{path}: row {r}, column 'y': binary outcome must be 0 or 1")
    try:
        return Dataset(np.array(ids), np.array(X), np.array(z), y_arr, outcome_type)
    except DatasetError as exc:
        raise InputError(f"{path}: {exc}") from None


# --- commands ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    raw = config.resolve_seed(config.load(args.config, "simulate"), args.seed)
    cfg = config.sim_config(raw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers if args.workers is not None else cfg.workers
    log.info("running %d replications (n=%d, K=%d) with %d worker(s)", cfg.J, cfg.n, cfg.K, workers)
    report = run_study(cfg, workers=workers)
    if args.format in ("csv", "both"):
        write_csv(out / "report.csv", REPORT_COLUMNS, report.rows)
    if args.format in ("json", "both"):
        write_json(out / "report.json", {
            "rows": report.rows,
            "failed_replications": [{"j": j, "cause": c} for j, c in report.failures],
            "config": report.config,
        })
    write_csv(out / "per_replication.csv", REPLICATION_COLUMNS, report.replications)
    for row in report.rows:
        print("{method:5s} matched {pct_matched_at_least_once:5.1f}%  ATT {att_mean:7.2f}  "
              "bias {bias:6.2f}  MAB {mab:5.2f}  RMSE {rmse:5.2f}".format(**row))
    return EXIT_OK


def analyze(data: Dataset, opts: dict, pipe, mcmc, workers: int = 1) -> dict:
    """Run PSM (with bootstrap SE) and BPSM on one dataset; returns every output table."""
    psm_ss, mcmc_ss, bpsm_ss, boot_ss = np.random.SeedSequence(opts["seed"]).spawn(4)
    psm = estimator.run_psm(data, pipe, np.random.default_rng(psm_ss))
    boot = estimator.bootstrap_se(data, pipe, opts["B"], boot_ss, workers=workers) if opts["B"] else None
    mcmc = replace(mcmc, seed=int(mcmc_ss.generate_state(1)[0]))
    bpsm = estimator.run_bpsm(data, pipe, mcmc, bpsm_ss)
    post = bpsm.posterior

    psm_lo, psm_hi = boot.interval() if boot is not None else (None, None)
    att_rows = [
        {"method": "PSM", "att": psm.att.att, "se": boot.se if boot else None,
         "ci_lo": psm_lo, "ci_hi": psm_hi, "pct_matched_at_least_once": psm.pct_matched},
        {"method": "BPSM", "att": post.mean, "se": post.sd,
         "ci_lo": post.ci_lo, "ci_hi": post.ci_hi, "pct_matched_at_least_once": bpsm.pct_matched_at_least_once},
    ]
    points = [estimator.att_point(ms, data, pipe.multiplicity) for ms in bpsm.matchsets]
    per_draw = {
        "bpsm": [{"draw": k, "att": pt.att, "p1": pt.p1, "p0": pt.p0} for k, pt in enumerate(points)],
        "psm": {"att": psm.att.att, "p1": psm.att.p1, "p0": psm.att.p0,
                "bootstrap_replicates": boot.replicates.tolist() if boot else []},
        "acceptance_rate": bpsm.draws.acceptance_rate,
    }
    summary = propensity.posterior_ps_summary(bpsm.draws, data.X)
    ids, z = data.ids.tolist(), data.Z.tolist()
    ps_rows = [{"unit": ids[i], "z": z[i], "ps_mean": summary["mean"][i], "ps_lo": summary["lo"][i],
                "ps_hi": summary["hi"][i]} for i in range(data.n)]
    freq_rows = [{"unit": ids[i], "z": z[i], "fraction": bpsm.match_fraction[i]} for i in range(data.n)]
    dk = estimator.drop_keep_export(psm.scores, psm.matchset, data.Z)
    dk_rows = [{"unit": ids[i], "z": z[i], "ps": dk["ps"][i], "kept": dk["kept"][i]} for i in range(data.n)]
    return {"att": att_rows, "per_draw": per_draw, "ps_posterior": ps_rows,
            "match_frequency": freq_rows, "drop_keep": dk_rows}


def cmd_analyze(args) -> int:
    raw = config.resolve_seed(config.load(args.config, "analyze"), args.seed)
    opts, pipe, mcmc = config.analyze_config(raw)
    data = read_dataset(args.data, opts["outcome_type"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers if args.workers is not None else opts["workers"]
    log.info("analyzing %d units (%d treated), K=%d, B=%d", data.n, int(data.Z.sum()), mcmc.K, opts["B"])
    res = analyze(data, opts, pipe, mcmc, workers)
    write_json(out / "att.json", res["att"])
    write_json(out / "per_draw.json", res["per_draw"])
    write_csv(out / "ps_posterior.csv", PS_POSTERIOR_COLUMNS, res["ps_posterior"])
    write_csv(out / "match_frequency.csv", MATCH_FREQUENCY_COLUMNS, res["match_frequency"])
    write_csv(out / "drop_keep.csv", DROP_KEEP_COLUMNS, res["drop_keep"])
    for row in res["att"]:
        print(json.dumps(row))
    return EXIT_OK


def cmd_validate(args) -> int:
    config.load(args.config, args.kind)
    print("OK")
    return EXIT_OK


def cmd_version(args) -> int:
    print(f"bpsm {__version__}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bpsm", description="Standard and Bayesian propensity score matching")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def runtime_flags(sp):
        sp.add_argument("--out", "-o", default=".", help="output directory (created if missing)")
        sp.add_argument("--workers", type=int, default=None, help="parallel worker processes")
        sp.add_argument("--seed", type=int, default=None, help="override the config/UN_SEED seed")

    sp = sub.add_parser("simulate", help="run a Monte Carlo study")
    sp.add_argument("config", help="JSON config file")
    sp.add_argument("--format", choices=("csv", "json", "both"), default="both", help="report format")
    runtime_flags(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="run PSM and BPSM on a CSV dataset")
    sp.add_argument("data", help="CSV with columns id,z,y,x1..xp")
    sp.add_argument("config", help="JSON config file")
    runtime_flags(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("validate-config", help="check a config file and report every problem")
    sp.add_argument("config")
    sp.add_argument("--for", dest="kind", choices=("simulate", "analyze"), default="simulate")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("version", help="print the version")
    sp.set_defaults(func=cmd_version)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "workers", None) is not None and args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_INPUT
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ReplicationFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except BpsmError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
