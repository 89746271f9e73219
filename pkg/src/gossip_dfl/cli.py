"""Command-line experiment runner.

    gossip-dfl run      --config CFG [--seed N] [--out DIR] [--protocol P]
    gossip-dfl compare  RUN_OR_CONFIG RUN_OR_CONFIG ... [--out FILE]
    gossip-dfl prepare  --config CFG [--out FILE.npz]
    gossip-dfl synth    --config CFG [--out FILE] [--format csv|npz]
    gossip-dfl per-file --config CFG [--protocols P,P,...] [--out DIR]

Exit codes: 0 success, 2 config error, 3 data error, 4 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as D
from .config import PROTOCOLS, ConfigError, ExperimentConfig, load_config
from .experiment import build_dataset, run_experiment, write_artifacts
from .gossip import ConfigurationError
from .metrics import MetricReport, metrics_table_csv
from .numerics import ParameterError, SeededRng

log = logging.getLogger("gossip_dfl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


class ComparisonError(RuntimeError):
    pass


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "protocol", None) is not None:
        changes["protocol.kind"] = args.protocol
    if getattr(args, "out", None) is not None and args.command == "run":
        changes["output_dir"] = args.out
    return cfg.replace(**changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    res = run_experiment(cfg)
    out = write_artifacts(res, cfg.output_dir)
    a = res.report.average
    print(f"{res.report.protocol}: accuracy={a.accuracy:.4f} f1={a.f1:.4f} "
          f"bytes={res.report.total_bytes} sim_ms={res.report.simulated_ms:.1f} -> {out}")
    return EXIT_OK


def _read_run(path: Path) -> dict:
    manifest = path / "manifest.json"
    if not manifest.is_file():
        raise FileNotFoundError(f"not a completed run directory: {path}")
    m = json.loads(manifest.read_text())
    return {"name": path.name, "fingerprint": m["dataset_fingerprint"], "summary": m["summary"],
            "wall_seconds": m["wall_seconds"], "protocol": m["protocol"]}


def compare_runs(paths) -> str:
    """Side-by-side CSV of metrics, bytes and training time for completed runs."""
    runs = [_read_run(Path(p)) for p in paths]
    if len(runs) < 2:
        raise ComparisonError("compare needs at least two runs")
    fps = {r["fingerprint"] for r in runs}
    if len(fps) > 1:
        raise ComparisonError(f"runs were made on different datasets (fingerprints {sorted(fps)})")
    cols, extra, seen = {}, {}, {}
    for r in runs:
        name = r["name"]
        if name in seen:
            seen[name] += 1
            name = f"{name}#{seen[name]}"
        else:
            seen[name] = 0
        s = r["summary"]
        cols[name] = MetricReport(s["accuracy"], s["precision"], s["recall"], s["f1"])
        extra[name] = {"protocol": r["protocol"], "total_bytes": s["total_bytes"],
                       "simulated_ms": float(s["simulated_ms"]),
                       "wall_seconds": float(r["wall_seconds"])}
    return metrics_table_csv(cols, extra)


def cmd_compare(args) -> int:
    dirs = []
    for item in args.runs:
        p = Path(item)
        if p.is_file() and p.suffix in (".yaml", ".yml"):
            cfg = load_config(p)
            res = run_experiment(cfg)
            dirs.append(write_artifacts(res, cfg.output_dir))
        elif p.is_dir():
            dirs.append(p)
        else:
            raise FileNotFoundError(f"no such run directory or config: {p}")
    table = compare_runs(dirs)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_prepare(args) -> int:
    cfg = _load(args)
    split = build_dataset(cfg, SeededRng(cfg.seed))
    out = Path(args.out or Path(cfg.output_dir) / "prepared.npz")
    out.parent.mkdir(parents=True, exist_ok=True)
    D.save_prepared(split.dataset, out)
    print(f"prepared {split.dataset.features.shape[0]} rows x {split.dataset.features.shape[1]} features -> {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _load(args)
    ds = cfg.dataset
    prepared = D.synthesize(ds.n, ds.dim, ds.anomaly_rate, SeededRng(cfg.seed).child(100))
    out = Path(args.out or Path(cfg.output_dir) / f"synthetic.{args.format}")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.format == "npz":
        D.save_prepared(prepared, out)
    else:
        tokens = np.array(D.BINARY_CLASSES)[prepared.labels]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*(f"f{j}" for j in range(prepared.features.shape[1])), "marker"])
        for row, tok in zip(prepared.features, tokens):
            w.writerow([*(repr(float(x)) for x in row), tok])
        out.write_text(buf.getvalue())
    print(f"synthesized {ds.n} rows ({int(prepared.labels.sum())} anomalies) -> {out}")
    return EXIT_OK


def cmd_per_file(args) -> int:
    """One run per data file and protocol; rows = files, columns = metrics."""
    cfg = _load(args)
    if cfg.dataset.source != "csv":
        raise ConfigError("dataset.source", "per-file mode needs csv files")
    protocols = args.protocols.split(",") if args.protocols else [cfg.protocol.kind]
    for p in protocols:
        if p not in PROTOCOLS:
            raise ConfigError("--protocols", f"unknown protocol {p!r}")
    out = Path(args.out or Path(cfg.output_dir) / "per_file")
    rows = []
    for path in cfg.dataset.paths:
        for proto in protocols:
            one = dataclasses.replace(
                cfg, dataset=dataclasses.replace(cfg.dataset, paths=(path,)),
                output_dir=str(out / Path(path).stem / proto),
            ).replace(**{"protocol.kind": proto})
            res = run_experiment(one)
            write_artifacts(res, one.output_dir)
            a = res.report.average
            rows.append([Path(path).name, proto, f"{a.accuracy:.6f}", f"{a.precision:.6f}",
                         f"{a.recall:.6f}", f"{a.f1:.6f}", res.report.total_bytes,
                         f"{res.report.simulated_ms:.6f}"])
            log.info("%s %s accuracy=%.4f", path, proto, a.accuracy)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file", "protocol", "accuracy", "precision", "recall", "f1", "total_bytes", "simulated_ms"])
    w.writerows(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_file.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gossip-dfl", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", metavar="PATH", help=out_help)
        p.add_argument("--protocol", choices=PROTOCOLS, help="override protocol.kind")

    p = sub.add_parser("run", help="run one experiment and write its artifacts")
    common(p, "output directory (overrides output_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="side-by-side table of completed runs or configs")
    p.add_argument("runs", nargs="+", metavar="RUN_DIR_OR_CONFIG")
    p.add_argument("--out", metavar="FILE", help="also write the table here")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("prepare", help="run the data pipeline and cache the prepared dataset")
    common(p, "output .npz file")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("synth", help="write a synthetic anomaly dataset")
    common(p, "output file")
    p.add_argument("--format", choices=("csv", "npz"), default="csv")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("per-file", help="one run per csv file (and protocol), aggregated")
    common(p, "output directory")
    p.add_argument("--protocols", help="comma-separated list, e.g. random-walk,epidemic,central")
    p.set_defaults(func=cmd_per_file)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.DataError, FileNotFoundError, ComparisonError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ParameterError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - exit-code contract
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
