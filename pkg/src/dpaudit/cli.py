"""``dpaudit`` command line.

Every ExperimentConfig field can be set in a flat ``key = value`` config
file (``#`` starts a comment) and overridden by a same-named flag, e.g.
``--eps-target 1`` or ``--eps_target=1``.  Sweep grids use ``sweep.KEY``
keys with comma-separated values.  ``DPAUDIT_SEED`` overrides the master
seed.

Exit codes: 0 success, 2 configuration error, 3 runtime failure, 4 when
``fault-demo`` reports a violation.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from typing import Optional

from dpaudit import accountant, canary, dp_train, harness, report
from dpaudit.errors import ConfigError

log = logging.getLogger("dpaudit")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VIOLATION = 0, 2, 3, 4

COMMANDS = ("gen", "calibrate", "audit", "sweep", "fault-demo", "toy", "report")
# keys understood by individual subcommands in addition to ExperimentConfig fields
EXTRA_KEYS = {"cells", "input", "x", "y", "group", "full_scale", "verbose"}
_FIELDS = {f.name: f for f in dataclasses.fields(harness.ExperimentConfig)}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` pairs; blank lines and ``#`` comments ignored."""
    out = {}
    try:
        lines = open(path).read().splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {line!r}")
        out[_norm_key(key)] = val.strip()
    return out


def _norm_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def parse_overrides(tokens: list[str]) -> dict[str, str]:
    """``--key value`` / ``--key=value`` pairs; a bare ``--flag`` means true."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, val = tok.split("=", 1)
            i += 1
        elif i + 1 < len(tokens) and not tokens[i + 1].startswith("--"):
            key, val = tok, tokens[i + 1]
            i += 2
        else:
            key, val = tok, "true"
            i += 1
        out[_norm_key(key)] = val
    return out


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_seeds(text: str) -> tuple[int, ...]:
    """``"3"``, ``"0,1,5"`` or a half-open range ``"0:10"``."""
    text = text.strip()
    try:
        if ":" in text:
            lo, hi = text.split(":")
            return tuple(range(int(lo), int(hi)))
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as e:
        raise ConfigError(f"bad seed list {text!r}") from e


def parse_r(text: str):
    text = text.strip()
    if text in ("all", "sign"):
        return text
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError as e:
        raise ConfigError(f"r must be 'all', 'sign', an int or a fraction, got {text!r}") from e


def convert_value(key: str, text: str):
    """Typed value for an ExperimentConfig field."""
    kind = str(_FIELDS[key].type)
    try:
        if key == "seeds":
            return parse_seeds(text)
        if key == "r":
            return parse_r(text)
        if kind.startswith("Optional"):
            if text.strip().lower() in ("", "none"):
                return None
            kind = kind[len("Optional["):-1]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r}") from e


def build_config(raw: dict[str, str]) -> tuple[harness.ExperimentConfig, dict, dict]:
    """Split raw pairs into (config, sweep grid, subcommand extras)."""
    fields, grid, extras = {}, {}, {}
    for key, val in raw.items():
        if key.startswith("sweep."):
            name = key[len("sweep."):]
            if name not in _FIELDS:
                raise ConfigError(f"cannot sweep unknown key {name!r}")
            grid[name] = [convert_value(name, v.strip()) for v in val.split(",") if v.strip()]
        elif key in _FIELDS:
            fields[key] = convert_value(key, val)
        elif key in EXTRA_KEYS:
            extras[key] = val
        else:
            raise ConfigError(f"unknown config key {key!r}")
    if _parse_bool(extras.get("full_scale", "false")):
        for k, v in harness.FULL_SCALE.items():
            fields.setdefault(k, v)
    fields["master_seed"] = harness.master_seed_from_env(fields.get("master_seed", 0))
    return harness.ExperimentConfig(**fields), grid, extras


def _print_rows(rows) -> None:
    for row in rows:
        print(
            f"{row.run_id}: W={row.W}/{row.r} eps_L={row.eps_lower:.3f} eps_O={row.eps_optimal:.3f} "
            f"auc={row.auc:.3f} sigma={row.sigma:.4g} status={row.status}"
        )


def cmd_gen(cfg, grid, extras) -> int:
    if cfg.canary_mode not in canary.CANARY_MODES:
        raise ConfigError(f"gen writes synthetic canaries; canary_mode must be one of {canary.CANARY_MODES}")
    if not cfg.output:
        raise ConfigError("gen needs --output PATH")
    ds = harness.audit_canaries(cfg, harness._streams(cfg.master_seed, cfg.seeds[0]).data)
    ds.seed = cfg.seeds[0]
    canary.save_dataset(ds, cfg.output)
    print(f"wrote {ds.m} {ds.mode} canaries (d_x={ds.d_x}, C={ds.n_classes}) to {cfg.output}")
    return EXIT_OK


def cmd_calibrate(cfg, grid, extras) -> int:
    if math.isinf(cfg.eps_target):
        raise ConfigError("calibrate needs a finite --eps-target")
    budget = dp_train.PrivacyBudget(cfg.eps_target, cfg.delta)
    sigma = accountant.calibrate_sigma(budget, cfg.q, cfg.steps)
    eps = accountant.rdp_epsilon(sigma, cfg.q, cfg.steps, cfg.delta)
    print(f"sigma={sigma:.6g} eps={eps:.6g} delta={cfg.delta:g} q={cfg.q:g} steps={cfg.steps}")
    return EXIT_OK


def cmd_audit(cfg, grid, extras) -> int:
    rows = harness.run_experiment(cfg)
    _print_rows(rows)
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_RUNTIME


def cmd_sweep(cfg, grid, extras) -> int:
    if not grid:
        raise ConfigError("sweep needs at least one sweep.KEY = v1,v2,... entry")
    rows = harness.run_sweep(cfg, grid)
    _print_rows(rows)
    return EXIT_OK if all(r.status == "ok" for r in rows) else EXIT_RUNTIME


def cmd_fault_demo(cfg, grid, extras) -> int:
    reports = harness.run_fault_demo(cfg, cfg.fault)
    for rep in reports:
        print(rep.line())
    return EXIT_VIOLATION if any(rep.verdict == "VIOLATION" for rep in reports) else EXIT_OK


def parse_cells(text: str) -> list[tuple[int, float]]:
    """``"1:0,1:10,0:50"`` to [(a, b), ...]."""
    cells = []
    for item in text.split(","):
        a, sep, b = item.strip().partition(":")
        if not sep:
            raise ConfigError(f"toy cell must be a:b, got {item!r}")
        try:
            cells.append((int(a), float(b)))
        except ValueError as e:
            raise ConfigError(f"bad toy cell {item!r}") from e
    return cells


def cmd_toy(cfg, grid, extras) -> int:
    cells = parse_cells(extras.get("cells", "1:0,1:10,1:50,0:50"))
    rows = harness.run_toy_insight(cells, cfg.seeds, master_seed=cfg.master_seed)
    print("a,b,seed,train_acc,test_acc,gap,auc")
    for r in rows:
        print(f"{r['a']},{r['b']:g},{r['seed']},{r['train_acc']:.4f},{r['test_acc']:.4f},{r['gap']:.4f},{r['auc']:.4f}")
    if cfg.output:
        with open(cfg.output, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def cmd_report(cfg, grid, extras) -> int:
    if "input" not in extras or not cfg.output:
        raise ConfigError("report needs --input RESULTS.csv and --output CHART.svg")
    rows = report.read_csv(extras["input"])
    x, y, group = extras.get("x", "m"), extras.get("y", "eps_lower"), extras.get("group", "flow")
    for name in (x, y, group):
        if name not in report.FIELDS:
            raise ConfigError(f"unknown result field {name!r}")
    report.emit_chart([r for r in rows if r.status == "ok"], x, y, group, cfg.output)
    print(f"wrote chart of {y} vs {x} by {group} to {cfg.output}")
    return EXIT_OK


HANDLERS = {
    "gen": cmd_gen,
    "calibrate": cmd_calibrate,
    "audit": cmd_audit,
    "sweep": cmd_sweep,
    "fault-demo": cmd_fault_demo,
    "toy": cmd_toy,
    "report": cmd_report,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dpaudit",
        description="One-run privacy auditing of DP-SGD.",
        epilog="Any config key can be passed as --key value; see README for the list.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value config file")
    args, rest = parser.parse_known_args(argv)
    try:
        raw = read_config_file(args.config) if args.config else {}
        raw.update(parse_overrides(rest))
        verbose = _parse_bool(raw.get("verbose", "false"))
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
        cfg, grid, extras = build_config(raw)
        return HANDLERS[args.command](cfg, grid, extras)
    except ConfigError as e:
        print(f"dpaudit: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"dpaudit: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
