"""Command-line entry point: ``nakamoto-bounds {bound,sweep,depth,simulate}``.

Exit codes: 0 on success, 2 on invalid input (including p <= 1/2), 3 when
``depth`` cannot reach the target within ``--k-max``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import math
import sys
from typing import Any

from . import attack_sim
from .bounds import (
    BOUND_NAMES,
    NotReachable,
    bounds_report,
    evaluate_bound,
    min_depth_for_risk,
    sweep,
    thm2_lower,
    thm2_upper,
)
from .core_model import ProtocolParams, validate_params
from .errors import DomainError, InvariantViolation

SCHEMA_VERSION = "1"
EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNREACHABLE = 3

PRESETS = {
    "bitcoin": {"lam": 1.0 / 600.0, "delta": 10.0},
    "ethereum": {"lam": 1.0 / 13.0, "delta": 2.0},
}
DEFAULT_PRESET = "bitcoin"

SIM_MODES = {
    "reduced-upper": "rigged-upper",
    "reduced-lower": "delta0-exact",
    "full": "full",
}
HORIZON_WARN_FRACTION = 1e-3

_DEFAULTS: dict[str, Any] = {
    "format": "table",
    "bound": "thm2u",
    "k_max": 10_000,
    "mode": "reduced-upper",
    "trials": 100_000,
    "seed": 0,
    "burn_in": None,
    "epsilon_halt": attack_sim.DEFAULT_EPSILON_HALT,
    "threads": 1,
}


class UsageError(DomainError):
    pass


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--preset", choices=sorted(PRESETS),
                        help="bitcoin: lambda=1/600, delta=10; ethereum: lambda=1/13, delta=2")
    rate = common.add_mutually_exclusive_group()
    rate.add_argument("--lambda", dest="lam", type=float, metavar="RATE",
                      help="total mining rate in blocks per second")
    rate.add_argument("--block-interval", dest="block_interval", type=float, metavar="SECONDS",
                      help="mean block interval; the reciprocal of --lambda")
    common.add_argument("--rho", type=float, help="honest fraction of the mining rate")
    common.add_argument("--delta", type=float, help="propagation delay bound in seconds")
    common.add_argument("--format", choices=("json", "csv", "table"))
    common.add_argument("--config", metavar="FILE",
                        help="flat 'key = value' file using the long flag names; flags win")

    parser = argparse.ArgumentParser(
        prog="nakamoto-bounds",
        description="Latency-security bounds for Nakamoto consensus.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bound", parents=[common], argument_default=argparse.SUPPRESS,
                       help="all four bounds at one confirmation depth")
    p.add_argument("--k", type=int)

    p = sub.add_parser("sweep", parents=[common], argument_default=argparse.SUPPRESS,
                       help="bounds over a range of depths")
    p.add_argument("--k-min", dest="k_min", type=int)
    p.add_argument("--k-max", dest="k_max", type=int)

    p = sub.add_parser("depth", parents=[common], argument_default=argparse.SUPPRESS,
                       help="smallest depth meeting a risk target")
    p.add_argument("--target", type=float)
    p.add_argument("--bound", choices=BOUND_NAMES)
    p.add_argument("--k-max", dest="k_max", type=int)

    p = sub.add_parser("simulate", parents=[common], argument_default=argparse.SUPPRESS,
                       help="Monte Carlo estimate next to the matching closed form")
    p.add_argument("--mode", choices=tuple(SIM_MODES))
    p.add_argument("--k", type=int)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=float, metavar="BLOCKS")
    p.add_argument("--epsilon-halt", dest="epsilon_halt", type=float)
    p.add_argument("--threads", type=int)
    return parser


def _config_tokens(path: str) -> list[str]:
    reader = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            reader.read_string("[config]\n" + fh.read(), source=path)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot read config file {path!r}: {exc}") from None
    tokens: list[str] = []
    for key, value in reader.items("config"):
        key = key.strip().replace("_", "-")
        if key == "config":
            raise UsageError("config files cannot include other config files")
        tokens += [f"--{key}", value.strip()]
    return tokens


def _resolve(parser: argparse.ArgumentParser, argv: list[str] | None) -> dict[str, Any]:
    cli = vars(parser.parse_args(argv))
    merged: dict[str, Any] = {}
    if "config" in cli:
        from_file = vars(parser.parse_args([cli["command"], *_config_tokens(cli["config"])]))
        if {"lam", "block_interval"} & cli.keys():
            from_file.pop("lam", None)
            from_file.pop("block_interval", None)
        if "preset" in cli:
            for key in ("lam", "block_interval", "delta"):
                from_file.pop(key, None)
        merged.update(from_file)
    merged.update(cli)
    if "lam" in merged and "block_interval" in merged:
        raise UsageError("give either --lambda or --block-interval, not both")
    for key, value in _DEFAULTS.items():
        merged.setdefault(key, value)
    return merged


def _params(opts: dict[str, Any]) -> ProtocolParams:
    preset = PRESETS[opts.get("preset", DEFAULT_PRESET)]
    if "block_interval" in opts:
        if not opts["block_interval"] > 0:
            raise UsageError(f"--block-interval must be > 0, got {opts['block_interval']!r}")
        lam = 1.0 / opts["block_interval"]
    else:
        lam = opts.get("lam", preset["lam"])
    if "rho" not in opts:
        raise UsageError("--rho is required")
    return validate_params(lam, opts["rho"], opts.get("delta", preset["delta"]))


def _require(opts: dict[str, Any], *names: str) -> None:
    missing = [n for n in names if n not in opts]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required option(s): {flags}")


def _record(command: str, params: ProtocolParams, inputs: dict[str, Any],
            results: dict[str, Any], warnings: list[str]) -> dict[str, Any]:
    echoed = {"lambda": params.lam, "rho": params.rho, "delta": params.delta, **inputs}
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "inputs": echoed,
        "results": results,
        "warnings": warnings,
    }


def _derived(params: ProtocolParams) -> dict[str, float]:
    return {"g": params.g, "p": params.p, "q": params.q}


def _bound_warnings(rows) -> list[str]:
    warnings = []
    for row in rows:
        if row.thm1_upper is None:
            warnings.append(f"k={row.k}: thm1_upper is undefined at p = 1 and is reported as null")
        elif row.thm1_upper > 1.0:
            warnings.append(f"k={row.k}: raw thm1_upper = {row.thm1_upper:.6g} exceeds 1 (clamped view is 1)")
        if not row.thm1_lower_below_thm2_lower:
            warnings.append(f"k={row.k}: thm1_lower = {row.thm1_lower:.6g} exceeds the exact "
                            f"delta=0 attack probability thm2_lower = {row.thm2_lower:.6g}")
    return warnings


def cmd_bound(opts: dict[str, Any]) -> tuple[dict[str, Any], int]:
    _require(opts, "k")
    params = _params(opts)
    report = bounds_report(opts["k"], params)
    results = {**_derived(params), **report.as_dict()}
    del results["k"]
    return _record("bound", params, {"k": report.k}, results, _bound_warnings([report])), EXIT_OK


def cmd_sweep(opts: dict[str, Any]) -> tuple[dict[str, Any], int]:
    _require(opts, "k_min", "k_max")
    params = _params(opts)
    table = sweep(params, opts["k_min"], opts["k_max"])
    results = {**_derived(params), "rows": table.as_dicts()}
    inputs = {"k_min": opts["k_min"], "k_max": opts["k_max"]}
    return _record("sweep", params, inputs, results, _bound_warnings(table.rows)), EXIT_OK


def cmd_depth(opts: dict[str, Any]) -> tuple[dict[str, Any], int]:
    _require(opts, "target")
    params = _params(opts)
    found = min_depth_for_risk(params, opts["target"], opts["bound"], opts["k_max"])
    inputs = {"target": opts["target"], "bound": opts["bound"], "k_max": opts["k_max"]}
    if isinstance(found, NotReachable):
        results = {"reachable": False, "k": None, "value": found.value_at_k_max}
        warnings = [f"{opts['bound']} stays above {opts['target']:.6g} for every k <= {found.k_max}"]
        return _record("depth", params, inputs, results, warnings), EXIT_UNREACHABLE
    results = {"reachable": True, "k": found, "value": evaluate_bound(opts["bound"], found, params)}
    return _record("depth", params, inputs, results, []), EXIT_OK


def cmd_simulate(opts: dict[str, Any]) -> tuple[dict[str, Any], int]:
    _require(opts, "k")
    params = _params(opts)
    mode, k = opts["mode"], opts["k"]
    # --threads is left out on purpose: output must not depend on it
    inputs = {"mode": mode, "k": k, "trials": opts["trials"], "seed": opts["seed"]}
    warnings: list[str] = []
    if mode == "full":
        inputs["burn_in"] = opts["burn_in"]
        inputs["epsilon_halt"] = opts["epsilon_halt"]
        est = attack_sim.full_sim_estimate(
            params, k, opts["trials"], opts["burn_in"], opts["epsilon_halt"], opts["seed"],
            threads=opts["threads"],
        )
        closed = {"thm2_lower": thm2_lower(k, params.rho), "thm2_upper": thm2_upper(k, params)}
        if est.horizon_fraction > HORIZON_WARN_FRACTION:
            warnings.append(f"{est.horizon_fraction:.3%} of trials hit the path horizon before halting")
    else:
        est = attack_sim.estimate(SIM_MODES[mode], k, params, opts["trials"], opts["seed"],
                                  threads=opts["threads"])
        if mode == "reduced-upper":
            closed = {"thm2_upper": thm2_upper(k, params)}
        else:
            closed = {"thm2_lower": thm2_lower(k, params.rho)}
    results = {
        **est.as_dict(),
        "horizon_fraction": est.horizon_fraction,
        "closed_form": closed,
        "within_3sigma": {name: est.covers(value) for name, value in closed.items()},
    }
    return _record("simulate", params, inputs, results, warnings), EXIT_OK


COMMANDS = {"bound": cmd_bound, "sweep": cmd_sweep, "depth": cmd_depth, "simulate": cmd_simulate}


def _check_finite(value: Any, where: str = "record") -> None:
    if isinstance(value, float) and not math.isfinite(value):
        raise InvariantViolation(f"non-finite number at {where}")
    if isinstance(value, dict):
        for key, item in value.items():
            _check_finite(item, f"{where}.{key}")
    elif isinstance(value, list):
        for i, item in enumerate(value):
            _check_finite(item, f"{where}[{i}]")


def _flatten(results: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    flat: dict[str, Any] = {}
    for key, value in results.items():
        if isinstance(value, dict):
            flat.update(_flatten(value, f"{prefix}{key}."))
        else:
            flat[prefix + key] = value
    return flat


def _csv_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def _table_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return format(value, ".5e")
    return str(value)


def _rows_of(record: dict[str, Any]) -> list[dict[str, Any]]:
    results = record["results"]
    if "rows" in results:
        return results["rows"]
    return [_flatten(results)]


def render(record: dict[str, Any], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(record, indent=2, allow_nan=False) + "\n"
    rows = _rows_of(record)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(list(rows[0]))
        for row in rows:
            writer.writerow([_csv_cell(v) for v in row.values()])
        return buf.getvalue()
    lines = [f"{record['command']}: " + ", ".join(
        f"{k}={_table_cell(v)}" for k, v in record["inputs"].items())]
    if "rows" in record["results"]:
        header = list(rows[0])
        cells = [[_table_cell(v) for v in row.values()] for row in rows]
        widths = [max(len(h), *(len(c[i]) for c in cells)) for i, h in enumerate(header)]
        lines.append("  ".join(h.rjust(w) for h, w in zip(header, widths)))
        lines.extend("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells)
    else:
        width = max(len(k) for k in rows[0])
        lines.extend(f"  {k.ljust(width)}  {_table_cell(v)}" for k, v in rows[0].items())
    lines.extend(f"warning: {w}" for w in record["warnings"])
    return "\n".join(lines) + "\n"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        opts = _resolve(parser, argv)
        record, code = COMMANDS[opts["command"]](opts)
    except DomainError as exc:
        print(f"{parser.prog}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _check_finite(record)
    out = render(record, opts["format"])
    sys.stdout.write(out)
    if opts["format"] == "csv":
        for warning in record["warnings"]:
            print(f"warning: {warning}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
