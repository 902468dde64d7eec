"""Command line entry point: ``rotreg <command> [flags]``.

Property suites print one PASS/FAIL line per check and exit 1 if any fails.
Experiments write CSV to ``--out`` (default standard output).  Every
experiment config field has a flag; ``--config FILE`` reads ``key=value``
lines with the same names, and explicit flags win.
"""

from __future__ import annotations

import argparse
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields

import numpy as np

from . import checks
from . import experiments as E
from . import mappings as mp

EPS_GRAMMAR = "LO:HI:logspaceN | LO:HI:linspaceN | comma-separated floats"
TUPLE_ITEM = {"hidden": int, "flagged": int, "bone_lengths": float, "weights": float,
              "eps": float, "mappings": str}
EXPERIMENTS = {
    "linearity": E.LinearityConfig,
    "align": E.AlignConfig,
    "ik": E.IKConfig,
    "probe-restricted": E.AlignConfig,
}


class UsageError(Exception):
    pass


def parse_eps(text: str) -> tuple:
    """Step sizes from ``1e-3:1:logspace20``, ``0.1:1:linspace5`` or ``0.1,0.2``."""
    m = re.fullmatch(r"\s*([^:]+):([^:]+):(logspace|linspace)(\d+)\s*", text)
    try:
        if m:
            lo, hi, kind, n = float(m[1]), float(m[2]), m[3], int(m[4])
            if n < 1 or lo <= 0 or hi <= 0:
                raise ValueError
            if kind == "logspace":
                return tuple(np.logspace(math.log10(lo), math.log10(hi), n))
            return tuple(np.linspace(lo, hi, n))
        vals = tuple(float(t) for t in text.split(","))
        if not vals or any(not v > 0 for v in vals):
            raise ValueError
        return vals
    except ValueError:
        raise UsageError(f"cannot parse {text!r}; expected {EPS_GRAMMAR}") from None


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _converter(name: str, typ: str):
    if name == "eps":
        return parse_eps
    if typ.startswith("tuple"):
        item = TUPLE_ITEM.get(name, str)
        return lambda s: tuple(item(t) for t in s.split(",") if t.strip())
    if typ == "bool":
        return _parse_bool
    if typ.startswith("int"):
        return int
    if typ.startswith("float"):
        return lambda s: None if s.strip().lower() == "none" else float(s)
    return str


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser, cls, skip=("seed",)):
    for f in fields(cls):
        if f.name in skip:
            continue
        conv = _converter(f.name, str(f.type))
        metavar = "LIST" if str(f.type).startswith("tuple") else f.name.upper()
        if f.name == "eps":
            metavar = "GRAMMAR"
        p.add_argument(_flag(f.name), dest="cfg_" + f.name, type=_wrap(conv, f.name), default=None,
                       metavar=metavar, help=f"default: {_show_default(f)}")


def _show_default(f):
    d = f.default if f.default_factory is None else "(computed)"  # type: ignore[misc]
    if isinstance(d, tuple) and len(d) > 4:
        return f"{len(d)} values"
    return d


def _wrap(conv, name):
    def run(text):
        try:
            return conv(text)
        except UsageError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"invalid value for {_flag(name)}: {exc}") from None
    run.__name__ = name
    return run


def read_config(path: str) -> dict[str, str]:
    """Flat ``key=value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{n}: expected key=value, got {line!r}")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def build_config(cls, args, file_values: dict[str, str], **fixed):
    kw = {}
    known = {f.name: f for f in fields(cls)}
    for k, v in file_values.items():
        if k in ("seed", "num_seeds", "jobs", "out", "max_angle"):
            continue
        if k not in known:
            raise UsageError(f"--config: unknown key {k!r} for this command; valid keys: {', '.join(known)}")
        try:
            kw[k] = _converter(k, str(known[k].type))(v)
        except ValueError as exc:
            raise UsageError(f"--config: invalid value for {k}: {exc}") from None
    for k in known:
        v = getattr(args, "cfg_" + k, None)
        if v is not None:
            kw[k] = v
    kw.update(fixed)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="base seed (default 0)")
    p.add_argument("--num-seeds", type=int, default=None, help="run seeds seed..seed+N-1 (default 1)")
    p.add_argument("--out", default=None, help="write CSV here instead of standard output")
    p.add_argument("--jobs", type=int, default=None, help="parallel worker processes (default 1)")
    p.add_argument("--config", default=None, help="key=value file; flags take precedence")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rotreg", description=__doc__.splitlines()[0])
    parser.add_argument("--list-checks", action="store_true", help="list every property check and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gradcheck", help="analytic vs finite-difference derivatives")
    p.add_argument("--mapping", action="append", default=None, help="restrict to mapping(s); repeatable")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--probes", type=int, default=200)
    _common(p)
    p = sub.add_parser("rankcheck", help="Jacobian rank of every mapping")
    p.add_argument("--samples", type=int, default=1000)
    _common(p)
    p = sub.add_parser("convexity", help="pre-image convexity, surjectivity and the property table")
    p.add_argument("--rotations", type=int, default=50)
    p.add_argument("--samples", type=int, default=1000)
    _common(p)
    p = sub.add_parser("identities", help="loss identities and the loss weight ratio")
    p.add_argument("--pairs", type=int, default=10_000)
    _common(p)
    p = sub.add_parser("limit-gs", help="Gram-Schmidt as a limit of weighted Procrustes")
    p.add_argument("--samples", type=int, default=100)
    _common(p)

    p = sub.add_parser("linearity", help="deviation from linearity along the gradient")
    _add_config_flags(p, E.LinearityConfig)
    _common(p)
    p = sub.add_parser("align", help="point-cloud alignment regression")
    _add_config_flags(p, E.AlignConfig)
    p.epilog = "--mapping accepts a comma list; 'matrix' trains raw outputs"
    _common(p)
    p = sub.add_parser("ik", help="inverse-kinematics auto-encoder on a synthetic chain")
    _add_config_flags(p, E.IKConfig)
    _common(p)
    p = sub.add_parser("probe-restricted", help="restricted rotation vectors on small-angle targets")
    p.add_argument("--max-angle", type=float, default=None, help="default pi/2")
    _add_config_flags(p, E.AlignConfig, skip=("seed", "mapping", "loss", "target_max_angle", "target_shift_x"))
    _common(p)

    p = sub.add_parser("report", help="aggregate CSV files into a markdown table")
    p.add_argument("csv", nargs="+")
    p.add_argument("--metric", action="append", default=None, help="only these metrics")
    p.add_argument("--key", default=None, help="use rows with this key instead of the last one per seed")
    p.add_argument("--out", default=None)
    return parser


# ------------------------------------------------------------- execution


def _run_suite(job):
    name, seed, kw = job
    if name == "convexity":
        res = checks.surjectivity(seed, kw.pop("samples"))
        return res + checks.convexity(seed, **kw)
    return checks.SUITES[name](seed, **kw)


def _run_experiment(job):
    command, cfg, extra = job
    if command == "linearity":
        return E.run_linearity(cfg)
    if command == "align":
        return E.run_alignment(cfg)
    if command == "ik":
        return E.run_ik(cfg)
    return E.run_restricted_rotvec_probe(extra, cfg)


def _pmap(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, jobs))


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def checks_report(name, seed, results) -> E.ExperimentReport:
    rep = E.ExperimentReport()
    for r in results:
        rep.add(name, r.name, seed, r.anchor, "value", r.value)
        rep.add(name, r.name, seed, r.anchor, "threshold", r.threshold)
        rep.add(name, r.name, seed, r.anchor, "passed", 1.0 if r.passed else 0.0)
    return rep


def report_table(reports, metrics=None, key=None) -> str:
    """Markdown table of per-seed final values, averaged over seeds."""
    last: dict[tuple, float] = {}
    for rep in reports:
        for e, m, s, k, name, v in rep.rows:
            if metrics and name not in metrics:
                continue
            if key is not None and k != key:
                continue
            if key is None and k in ("abort",):
                continue
            last[(e, m, name, s)] = v
    groups: dict[tuple, list] = {}
    for (e, m, name, s), v in last.items():
        groups.setdefault((e, m, name), []).append(v)
    lines = ["| experiment | mapping | metric | seeds | mean | min | max |",
             "|---|---|---|---|---|---|---|"]
    for (e, m, name), vals in groups.items():
        lines.append(f"| {e} | {m} | {name} | {len(vals)} | {np.mean(vals):.6g} | "
                     f"{np.min(vals):.6g} | {np.max(vals):.6g} |")
    return "\n".join(lines) + "\n"


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    if args.list_checks:
        for name, anchor in checks.list_checks():
            print(f"{name}\t{anchor}")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("rotreg: error: a command is required (or --list-checks)", file=sys.stderr)
        return 2
    try:
        return _dispatch(args)
    except UsageError as exc:
        print(f"rotreg {args.command}: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "report":
        reps = []
        for path in args.csv:
            try:
                with open(path, encoding="utf-8") as fh:
                    reps.append(E.ExperimentReport.from_csv(fh.read()))
            except (OSError, ValueError) as exc:
                raise UsageError(f"cannot read {path}: {exc}") from None
        _emit(report_table(reps, args.metric, args.key), args.out)
        return 0

    file_values = read_config(args.config) if args.config else {}

    def common(name, default, conv=int):
        v = getattr(args, name)
        if v is None and name in file_values:
            try:
                v = conv(file_values[name])
            except ValueError:
                raise UsageError(f"--config: invalid value for {name}") from None
        return default if v is None else v

    seed = common("seed", 0)
    nseeds = common("num_seeds", 1)
    workers = common("jobs", 1)
    out = args.out if args.out is not None else file_values.get("out")
    if nseeds < 1 or workers < 1:
        raise UsageError("--num-seeds and --jobs must be at least 1")
    seeds = list(range(seed, seed + nseeds))

    if args.command in checks.SUITES:
        kw = {k: v for k, v in vars(args).items()
              if k in ("samples", "probes", "rotations", "pairs")}
        if args.command == "gradcheck":
            kw["mappings"] = ([m for spec in args.mapping for m in spec.split(",")]
                              if args.mapping else None)
        for k, v in kw.items():
            if isinstance(v, int) and v <= 0:
                raise UsageError(f"{_flag(k)} must be positive")
        results = _pmap(_run_suite, [(args.command, s, dict(kw)) for s in seeds], workers)
        failed = 0
        rep = E.ExperimentReport()
        for s, res in zip(seeds, results):
            for r in res:
                print((f"[seed {s}] " if nseeds > 1 else "") + r.line())
                failed += not r.passed
            rep.extend(checks_report(args.command, s, res))
        total = sum(len(r) for r in results)
        print(f"{total - failed}/{total} checks passed")
        if out is not None:
            _emit(rep.to_csv(), out)
        return 1 if failed else 0

    cls = EXPERIMENTS[args.command]
    jobs = []
    if args.command == "linearity":
        for s in seeds:
            jobs.append(("linearity", build_config(cls, args, file_values, seed=s), None))
    elif args.command == "probe-restricted":
        max_angle = args.max_angle
        if max_angle is None and "max_angle" in file_values:
            max_angle = float(file_values["max_angle"])
        max_angle = math.pi / 2 if max_angle is None else max_angle
        if not 0.0 < max_angle < math.pi:
            raise UsageError("--max-angle must lie in (0, pi)")
        for s in seeds:
            jobs.append(("probe-restricted", build_config(cls, args, file_values, seed=s), max_angle))
    else:
        mapping_text = args.cfg_mapping or file_values.get("mapping") or cls().mapping
        mappings = [m.strip() for m in mapping_text.split(",") if m.strip()]
        for m in mappings:
            if m != E.MATRIX or args.command != "align":
                try:
                    mp.parse_mapping(m)
                except ValueError as exc:
                    raise UsageError(f"--mapping: {exc}") from None
            for s in seeds:
                cfg = build_config(cls, args, file_values, seed=s, mapping=m)
                jobs.append((args.command, cfg, None))
    reports = _pmap(_run_experiment, jobs, workers)
    _emit(E.ExperimentReport.merge(reports).to_csv(), out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
