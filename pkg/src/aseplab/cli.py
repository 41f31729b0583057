"""Command line interface.

Subcommands: simulate, identity, scaling, audit, oracle, report.  Options
can come from a flat `key = value` config file (UTF-8, # comments), with
command-line flags taking precedence.  Exit codes: 0 success, 2
validation error, 3 coupling/assertion failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import clockwork, harness, lattice
from .couplings import CouplingBugError, TruncationError
from .harness import DEFAULT_TIME_GRID, ExperimentConfig
from .lattice import ValidationError

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_ASSERTION = 3


def read_config_file(path: str) -> dict:
    """Flat `key = value` lines; `#` starts a comment."""
    if not os.path.exists(path):
        raise ValidationError(f"config file not found: {path}")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for ln_no, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{ln_no}: expected key = value")
            key, val = (tok.strip() for tok in line.split("=", 1))
            out[key] = val
    return out


def _parse_times(text: str) -> tuple:
    return tuple(float(tok) for tok in text.replace(",", " ").split())


_CONFIG_PARSERS = {
    "p": float, "rho": float, "lam": float, "u": int, "v": float,
    "replicas": int, "seed": int, "t": float, "times": _parse_times,
    "outdir": str, "window_factor": int, "threads": int,
    "ring_n": int, "ring_count": int, "kind": str, "observable": str,
}


def _merge(args: argparse.Namespace, defaults: dict) -> dict:
    """Config-file values overlaid by explicitly given flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            if key not in _CONFIG_PARSERS:
                raise ValidationError(f"unknown config key {key!r}")
            merged[key] = _CONFIG_PARSERS[key](raw)
    for key in list(merged) + list(_CONFIG_PARSERS):
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _experiment_config(kind: str, opts: dict) -> ExperimentConfig:
    times = opts.get("times")
    if times is None:
        t = opts.get("t")
        times = DEFAULT_TIME_GRID if t is None else (float(t),)
    return ExperimentConfig(
        kind=kind,
        p=opts.get("p", 0.7),
        rho=opts.get("rho", 0.5),
        lam=opts.get("lam"),
        u=opts.get("u", 10),
        v=opts.get("v"),
        times=times,
        replicas=opts.get("replicas", 2000),
        seed=opts.get("seed", 1),
        outdir=opts.get("outdir"),
        window_factor=opts.get("window_factor", 1),
        threads=opts.get("threads"),
        ring_n=opts.get("ring_n", 5),
        ring_count=opts.get("ring_count", 2),
    )


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="flat key = value config file")
    sp.add_argument("--p", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--u", type=int)
    sp.add_argument("--v", type=float)
    sp.add_argument("--t", type=float)
    sp.add_argument("--times", type=_parse_times,
                    help="comma or space separated time grid")
    sp.add_argument("--replicas", type=int)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--outdir")
    sp.add_argument("--window-factor", dest="window_factor", type=int)
    sp.add_argument("--threads", type=int)
    sp.add_argument("--ring-n", "--ring", dest="ring_n", type=int)
    sp.add_argument("--ring-count", "--count", dest="ring_count", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aseplab",
                                 description="ASEP simulator and verification harness")
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="single stationary run, snapshot + event log")
    _add_common(sp)
    sp.add_argument("--events-csv", help="dump the merged event log here")

    sp = sub.add_parser("identity", help="exact mean/variance identity checks")
    _add_common(sp)

    sp = sub.add_parser("scaling", help="exponent fits across the time grid")
    _add_common(sp)
    sp.add_argument("--observable", choices=["current", "diffusivity"],
                    default=None)

    sp = sub.add_parser("audit", help="coupling, mark or segment audits")
    _add_common(sp)
    sp.add_argument("--kind", choices=["mark", "coupling", "segment"],
                    default=None)

    sp = sub.add_parser("oracle", help="exact small-chain comparisons")
    _add_common(sp)

    sp = sub.add_parser("report", help="print a human summary of an output dir")
    sp.add_argument("dir")
    return ap


def _cmd_simulate(args) -> int:
    opts = _merge(args, {"t": 10.0, "rho": 0.5, "p": 0.7, "seed": 1})
    t = float(opts.get("t", 10.0))
    params = lattice.Params(opts.get("p", 0.7))
    win = lattice.experiment_window(t, abs(opts.get("v") or 0.0),
                                    factor=opts.get("window_factor", 1))
    config = lattice.sample_bernoulli(win, opts["rho"], opts.get("seed", 1))
    hs = lattice.init_height(config)
    stream = clockwork.ClockStream(opts.get("seed", 1), win, params, t)
    events = list(stream)
    for ev in events:
        hs.apply_event(ev.site, ev.direction)
    outdir = opts.get("outdir") or "."
    os.makedirs(outdir, exist_ok=True)
    snap = os.path.join(outdir, "snapshot.csv")
    with open(snap, "w", encoding="utf-8") as fh:
        fh.write(lattice.dump_configuration(hs.config, hs.anchor))
    if getattr(args, "events_csv", None):
        clockwork.dump_event_log(events, args.events_csv)
    print(f"applied {len(events)} events over [{win.lo}, {win.hi}], "
          f"h_0({t:g}) = {hs.anchor}")
    print(f"snapshot written to {snap}")
    return EXIT_OK


def _print_summary(summary: dict) -> None:
    checks = _collect_checks(summary)
    for name, ok in checks:
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")


def _collect_checks(summary: dict, prefix: str = "") -> list:
    out = []
    for key, val in sorted(summary.items()):
        name = f"{prefix}{key}"
        if isinstance(val, (bool, np.bool_)):
            out.append((name, bool(val)))
        elif isinstance(val, dict):
            out.extend(_collect_checks(val, name + "."))
        elif isinstance(val, list) and val and isinstance(val[0], dict):
            for i, item in enumerate(val):
                out.extend(_collect_checks(item, f"{name}[{i}]."))
    return out


def _run_kind(kind: str, args, extra_defaults: dict | None = None) -> int:
    opts = _merge(args, extra_defaults or {})
    cfg = _experiment_config(kind, opts)
    summary = harness.run_replicas(cfg)
    print(f"{kind}: seed={cfg.seed} replicas={cfg.replicas}")
    _print_summary(summary)
    failed = [name for name, ok in _collect_checks(summary) if not ok]
    if failed:
        print(f"{len(failed)} check(s) failed")
        return EXIT_ASSERTION
    return EXIT_OK


def _cmd_scaling(args) -> int:
    opts = _merge(args, {})
    observable = opts.get("observable") or "current"
    kind = "scaling-current" if observable == "current" else "scaling-diffusivity"
    return _run_kind(kind, args)


def _cmd_audit(args) -> int:
    opts = _merge(args, {})
    which = opts.get("kind") or "coupling"
    kind = {"mark": "mark-audit", "coupling": "coupling-audit",
            "segment": "segment-audit"}[which]
    defaults = {}
    if opts.get("lam") is None:
        defaults["lam"] = opts.get("rho", 0.5) - 0.1
    return _run_kind(kind, args, defaults)


def _cmd_report(args) -> int:
    path = os.path.join(args.dir, "summary.json")
    if not os.path.exists(path):
        raise ValidationError(f"no summary.json under {args.dir}")
    with open(path) as fh:
        summary = json.load(fh)
    print(f"experiment: {summary.get('kind', '?')}")
    _print_summary(summary)
    return EXIT_OK


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "identity":
            return _run_kind("identity", args,
                             {"replicas": 10_000, "t": 50.0})
        if args.command == "scaling":
            return _cmd_scaling(args)
        if args.command == "audit":
            return _cmd_audit(args)
        if args.command == "oracle":
            return _run_kind("oracle-compare", args,
                             {"replicas": 100_000, "t": 1.0})
        if args.command == "report":
            return _cmd_report(args)
        raise ValidationError(f"unknown command {args.command!r}")
    except (ValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CouplingBugError, TruncationError) as exc:
        print(f"assertion failure: {exc}", file=sys.stderr)
        return EXIT_ASSERTION


if __name__ == "__main__":
    sys.exit(main())
