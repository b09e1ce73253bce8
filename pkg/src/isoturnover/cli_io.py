"""Command-line entry point: analyze, simulate, evaluate, upset-data, corners-count.

Every command accepts ``--config`` (YAML or JSON); command-line flags
override file keys and unknown keys are rejected. Outputs are written to
``out_dir`` together with a ``manifest.json`` that carries no timestamps, so
reruns with the same inputs are byte-identical.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 calibration
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import sys
from collections import Counter
from pathlib import Path

import numpy as np
import yaml

from isoturnover import __version__
from isoturnover.coding import (
    CODINGS,
    OUTCOME_COLUMN,
    PART_COLUMN,
    ItemSpec,
    apply_coding,
    coarsen_array,
    encode_dataset,
    grid_from_items,
    preset_items,
)
from isoturnover.dagtest import TierConfig, derive_tiers
from isoturnover.errors import CalibrationError, ConfigError, DataError, InputError
from isoturnover.lattice import GridSpec, UpwardClosedSet, closure_count, lift
from isoturnover.metrics import cutoff_sweep, matched_specificity_compare, reports_to_csv
from isoturnover.pvalue import ORDERINGS
from isoturnover.simulation import (
    SHAPES,
    DgpConfig,
    default_turnover,
    results_to_csv,
    run_null_fwer,
    run_part1,
    run_part2,
    run_tiering_experiment,
)
from isoturnover.turnover import PARENT_RULES, TurnoverConfig, manifest, run_turnover, to_frequency

EXIT_CONFIG, EXIT_DATA, EXIT_CALIBRATION = 2, 3, 4

TURNOVER_KEYS = {"tau", "alpha", "kappa", "alpha_R", "alpha_B", "parent_rule", "coding_red_to_blue",
                 "coding_blue_to_red", "ordering", "seed", "tiering", "red_label", "blue_label"}
COMMON_KEYS = {"threads", "out_dir"}
COMMAND_KEYS = {
    "analyze": COMMON_KEYS | TURNOVER_KEYS | {"input", "items"},
    "simulate": COMMON_KEYS | TURNOVER_KEYS | {"mode", "ns", "target_masses", "shapes", "replications",
                                               "beta", "gamma", "null_levels"},
    "evaluate": COMMON_KEYS | {"input", "items", "corners", "cutoffs", "digits"},
    "upset-data": COMMON_KEYS | {"input", "items", "top"},
    "corners-count": COMMON_KEYS | {"corners", "lift_to"},
}
TIERING_KEYS = {"enabled", "item_tiers", "tier_weights", "n_tiers", "sizes"}
SIM_MODES = ("part1", "part2", "tiering", "null")


# ---------------------------------------------------------------- config


def load_config(path) -> dict:
    """Read a YAML or JSON mapping; anything else is a configuration error."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    try:
        cfg = json.loads(text) if p.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"config {p} must be a mapping")
    return cfg


def _flatten_dotted(cfg: dict) -> dict:
    # "tiering.enabled: true" and "tiering: {enabled: true}" are equivalent
    out = {}
    for k, v in cfg.items():
        if "." in k:
            head, tail = k.split(".", 1)
            out.setdefault(head, {})
            if not isinstance(out[head], dict):
                raise ConfigError(f"key {head!r} given both as a value and as a section")
            out[head][tail] = v
        elif k in out and isinstance(out[k], dict) and isinstance(v, dict):
            out[k].update(v)
        else:
            out[k] = v
    return out


def merge_config(command: str, file_cfg: dict, overrides: dict) -> dict:
    """File keys, then non-None flag values; unknown keys raise ConfigError."""
    cfg = _flatten_dotted(dict(file_cfg))
    allowed = COMMAND_KEYS[command]
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {unknown}")
    for k, v in overrides.items():
        if v is None:
            continue
        if k == "tiering.enabled":
            t = cfg.get("tiering") or {}
            cfg["tiering"] = {**t, "enabled": bool(v)} if isinstance(t, dict) else {"enabled": bool(v)}
        else:
            cfg[k] = v
    t = cfg.get("tiering")
    if t is not None:
        if not isinstance(t, dict):
            raise ConfigError("tiering must be a mapping")
        bad = sorted(set(t) - TIERING_KEYS)
        if bad:
            raise ConfigError(f"unknown tiering keys: {bad}")
    return cfg


def _item_tiers(spec, names) -> dict:
    """Accept {item: tier} (tiers from 1) or [[items of tier 1], [tier 2], ...]."""
    if isinstance(spec, dict):
        return {str(k): int(v) for k, v in spec.items()}
    if isinstance(spec, list):
        out = {}
        for t, group in enumerate(spec, start=1):
            for name in group:
                out[str(name)] = t
        return out
    raise ConfigError("tiering.item_tiers must be a mapping or a list of item lists")


def turnover_config(cfg: dict, tiers: TierConfig | None = None, defaults: dict | None = None) -> TurnoverConfig:
    kw = {**(defaults or {}), **{k: cfg[k] for k in TURNOVER_KEYS - {"tiering"} if k in cfg}}
    if "parent_rule" in kw and kw["parent_rule"] not in PARENT_RULES:
        raise ConfigError(f"parent_rule must be one of {PARENT_RULES}")
    for key in ("coding_red_to_blue", "coding_blue_to_red"):
        if key in kw and kw[key] not in CODINGS:
            raise ConfigError(f"{key} must be one of {CODINGS}")
    if "ordering" in kw and kw["ordering"] not in ORDERINGS:
        raise ConfigError(f"ordering must be one of {ORDERINGS}")
    try:
        return TurnoverConfig(**kw, tiering=tiers)
    except (InputError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- data


def _read_rows(path) -> tuple:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            rows = list(reader)
            header = list(reader.fieldnames or [])
    except OSError as exc:
        raise ConfigError(f"cannot read input {path}: {exc}") from exc
    return header, rows


def _auto_items(header, rows) -> tuple:
    names = [h for h in header if h not in (OUTCOME_COLUMN, PART_COLUMN)]
    if not names:
        raise DataError("no item columns in input", [(0, None, None)])
    items, issues = [], []
    for name in names:
        top = 1
        for r, row in enumerate(rows, start=1):
            s = str(row.get(name, "")).strip()
            if s == "" or s.lower() in ("na", "nan", "."):
                continue
            try:
                f = float(s)
            except ValueError:
                issues.append((r, name, s))
                continue
            if not f.is_integer() or f < 0:
                issues.append((r, name, s))
                continue
            top = max(top, int(f))
        items.append(ItemSpec(name, top + 1))
    if issues:
        preview = ", ".join(f"row {r} {c}={v!r}" for r, c, v in issues[:5])
        raise DataError(f"{len(issues)} invalid cells for inferred integer items: {preview}", issues)
    return tuple(items)


def resolve_items(spec, header, rows) -> tuple:
    """``"auto"``, a preset name, or a list of {name, levels, reverse_coded, labels}."""
    if spec is None:
        ace = preset_items("ace")
        spec = "ace" if all(it.name in header for it in ace) else "auto"
    if isinstance(spec, str):
        if spec == "auto":
            return _auto_items(header, rows)
        try:
            return preset_items(spec)
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
    if isinstance(spec, list):
        try:
            return tuple(ItemSpec(str(d["name"]), int(d["levels"]), bool(d.get("reverse_coded", False)),
                                  tuple(d["labels"]) if d.get("labels") else None) for d in spec)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed item list: {exc}") from exc
    raise ConfigError("items must be 'auto', a preset name, or a list of item descriptions")


def load_dataset(cfg: dict, need_part: bool = False):
    if not cfg.get("input"):
        raise ConfigError("an input CSV is required (input: or --input)")
    header, rows = _read_rows(cfg["input"])
    if OUTCOME_COLUMN not in header:
        raise ConfigError(f"input lacks the outcome column {OUTCOME_COLUMN}")
    if need_part and PART_COLUMN not in header:
        raise ConfigError(f"input lacks the part column {PART_COLUMN}")
    items = resolve_items(cfg.get("items"), header, rows)
    missing = [it.name for it in items if it.name not in header]
    if missing:
        raise ConfigError(f"input lacks item columns {missing}")
    return encode_dataset(rows, items, "frequency")


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_json_safe(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_corners(out: Path, stem: str, sel: UpwardClosedSet) -> list:
    write_json(out / f"{stem}.json", sel.to_dict())
    (out / f"{stem}.csv").write_text(sel.to_csv(), encoding="utf-8")
    return [f"{stem}.json", f"{stem}.csv"]


def read_corners(path, grid: GridSpec | None = None) -> UpwardClosedSet:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read corners file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"corners file {path} is not JSON: {exc}") from exc
    try:
        return UpwardClosedSet.from_dict(d, grid)
    except (InputError, KeyError, TypeError) as exc:
        raise DataError(f"corners file {path}: {exc}") from exc


def _out_dir(cfg) -> Path:
    out = Path(cfg.get("out_dir") or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest_base(command: str, cfg: dict) -> dict:
    # where outputs land is not part of the result
    m = {"command": command, "version": __version__,
         "config": {k: v for k, v in cfg.items() if k != "out_dir"}}
    if cfg.get("input"):
        m["input_sha256"] = file_digest(cfg["input"])
    return m


# ---------------------------------------------------------------- commands


def cmd_analyze(cfg: dict) -> dict:
    data = load_dataset(cfg, need_part=True)
    tcfg = turnover_config(cfg)
    t = cfg.get("tiering") or {}
    tiers = None
    if t.get("enabled"):
        if t.get("item_tiers") is not None:
            tiers = TierConfig(_item_tiers(t["item_tiers"], data.grid.item_names),
                               tuple(t["tier_weights"]) if t.get("tier_weights") else None)
        else:
            # ranked on the screening part of the frequency direction
            try:
                tiers = derive_tiers(data.split_part(tcfg.red_label), int(t.get("n_tiers", 3)), t.get("sizes"))
            except InputError as exc:
                raise DataError(f"cannot derive tiers: {exc}") from exc
        tcfg = turnover_config(cfg, tiers)
    try:
        result = run_turnover(data, tcfg, threads=int(cfg.get("threads") or 1))
    except InputError as exc:
        raise DataError(str(exc)) from exc
    out = _out_dir(cfg)
    files = []
    files += write_corners(out, "corners_red_to_blue", result.dir_red_to_blue.selection)
    files += write_corners(out, "corners_blue_to_red", result.dir_blue_to_red.selection)
    files += write_corners(out, "corners_replicable", result.replicable)
    files += write_corners(out, "corners_global", result.global_)
    m = _manifest_base("analyze", cfg)
    m["results"] = manifest(result)
    if tiers is not None:
        m["tiers"] = dict(tiers.item_tiers)
    m["outputs"] = files + ["manifest.json"]
    write_json(out / "manifest.json", m)
    return m


def _as_tuple(v, cast):
    if v is None:
        return None
    if isinstance(v, (list, tuple)):
        return tuple(cast(x) for x in v)
    return (cast(v),)


def cmd_simulate(cfg: dict) -> dict:
    mode = cfg.get("mode", "part1")
    if mode not in SIM_MODES:
        raise ConfigError(f"mode must be one of {SIM_MODES}")
    seed = int(cfg.get("seed", 0))
    reps = int(cfg.get("replications", 100))
    threads = int(cfg.get("threads") or 1)
    base = default_turnover(float(cfg.get("tau", 0.2)))
    tcfg = turnover_config(cfg, defaults={"tau": base.tau, "ordering": base.ordering})
    out = _out_dir(cfg)
    m = _manifest_base("simulate", cfg)
    if mode == "null":
        levels = _as_tuple(cfg.get("null_levels"), int) or (3, 3)
        n = (_as_tuple(cfg.get("ns"), int) or (2_000,))[0]
        fwer = run_null_fwer(replications=reps, n=n, seed0=seed, levels=levels, turnover=tcfg, threads=threads)
        rows = [{"n": n, "target_mass": 0.0, "shape": "null", "method": tcfg.parent_rule, "metric": "fwer",
                 "value": fwer, "replications": reps, "seed0": seed}]
    else:
        dgp_kw = {"tau": tcfg.tau}
        if cfg.get("beta") is not None:
            dgp_kw["beta"] = _as_tuple(cfg["beta"], float)
        if cfg.get("gamma") is not None:
            dgp_kw["gamma"] = float(cfg["gamma"])
        try:
            dgp = DgpConfig(**dgp_kw)
        except InputError as exc:
            raise ConfigError(str(exc)) from exc
        shapes = _as_tuple(cfg.get("shapes"), str)
        if shapes and any(s not in SHAPES for s in shapes):
            raise ConfigError(f"shapes must come from {SHAPES}")
        kw = dict(masses=_as_tuple(cfg.get("target_masses"), float) or (0.5,), replications=reps,
                  seed0=seed, config=dgp, turnover=tcfg, threads=threads)
        if cfg.get("ns") is not None:
            kw["ns"] = _as_tuple(cfg["ns"], int)
        if shapes:
            kw["shapes"] = shapes
        fn = {"part1": run_part1, "part2": run_part2, "tiering": run_tiering_experiment}[mode]
        rows = fn(**kw)
    name = f"simulation_{mode}.csv"
    results_to_csv(rows, out / name)
    m["outputs"] = [name, "manifest.json"]
    m["rows"] = len(rows)
    write_json(out / "manifest.json", m)
    return m


def cmd_evaluate(cfg: dict) -> dict:
    data = load_dataset(cfg)
    if not cfg.get("corners"):
        raise ConfigError("a corners file is required (corners: or --corners)")
    sel = read_corners(cfg["corners"])
    if not sel.grid.same_items(data.grid):
        raise DataError(f"corner items {sel.grid.item_names} do not match dataset items {data.grid.item_names}")
    try:
        sel = to_frequency(sel, data.grid)
    except InputError as exc:
        raise DataError(str(exc)) from exc
    Ks = _as_tuple(cfg.get("cutoffs"), int) or tuple(range(1, 10))
    if any(not 1 <= K <= data.grid.dim for K in Ks):
        raise ConfigError(f"cutoffs must lie in 1..{data.grid.dim}")
    reports = cutoff_sweep(data, Ks, sel, "replicable subgroup")
    cmp_ = matched_specificity_compare(reports)
    out = _out_dir(cfg)
    digits = cfg.get("digits")
    (out / "screening_report.csv").write_text(reports_to_csv(reports, digits), encoding="utf-8")
    m = _manifest_base("evaluate", cfg)
    m["corners_sha256"] = file_digest(cfg["corners"])
    m["n_rows"] = data.n
    m["reports"] = [r.row() for r in reports]
    m["matched_comparison"] = cmp_.to_dict()
    m["outputs"] = ["screening_report.csv", "manifest.json"]
    write_json(out / "manifest.json", m)
    return m


def upset_tables(data, top: int = 30) -> tuple:
    """Exact-combination counts (binarized items) and per-item marginal counts."""
    B = coarsen_array(data.X)
    names = data.grid.item_names
    counts = Counter(tuple(int(v) for v in row) for row in B)
    combos = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:top]
    combo_rows = [{"combination": "&".join(n for n, v in zip(names, c) if v) or "(none)",
                   "degree": sum(c), "count": k} for c, k in combos]
    marg = B.sum(axis=0)
    marginal_rows = [{"item": n, "count": int(v)} for n, v in zip(names, marg)]
    return combo_rows, marginal_rows


def _write_table(path: Path, rows, fields) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_upset_data(cfg: dict) -> dict:
    data = load_dataset(cfg)
    combos, marg = upset_tables(data, int(cfg.get("top", 30)))
    out = _out_dir(cfg)
    _write_table(out / "upset_combinations.csv", combos, ["combination", "degree", "count"])
    _write_table(out / "upset_marginals.csv", marg, ["item", "count"])
    m = _manifest_base("upset-data", cfg)
    m["n_rows"] = data.n
    m["outputs"] = ["upset_combinations.csv", "upset_marginals.csv", "manifest.json"]
    write_json(out / "manifest.json", m)
    return m


def _lift_target(spec) -> GridSpec:
    if spec in ("ace", "ace10", "brfss"):
        return grid_from_items(preset_items(spec))
    d = json.loads(Path(spec).read_text(encoding="utf-8"))
    return GridSpec.from_dict(d.get("grid", d))


def cmd_corners_count(cfg: dict) -> dict:
    if not cfg.get("corners"):
        raise ConfigError("a corners file is required (corners: or --corners)")
    sel = read_corners(cfg["corners"])
    res = {"grid_size": sel.grid.size, "n_corners": len(sel.corners), "covered": closure_count(sel)}
    res["coverage_pct"] = 100.0 * res["covered"] / res["grid_size"]
    if cfg.get("lift_to"):
        try:
            target = _lift_target(cfg["lift_to"])
            lifted = lift(sel, target)
        except (InputError, OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot lift corners: {exc}") from exc
        res["lifted"] = {"grid_size": target.size, "covered": closure_count(lifted),
                         "coverage_pct": 100.0 * closure_count(lifted) / target.size}
    if cfg.get("out_dir"):
        out = _out_dir(cfg)
        m = _manifest_base("corners-count", cfg)
        m["results"] = res
        write_json(out / "manifest.json", m)
    return res


COMMANDS = {
    "analyze": cmd_analyze,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "upset-data": cmd_upset_data,
    "corners-count": cmd_corners_count,
}


# ---------------------------------------------------------------- argparse


def _csv_list(cast):
    def parse(s):
        try:
            return [cast(x) for x in s.split(",") if x.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="isoturnover", description="Isotonic subgroup selection with data turnover.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML or JSON config file")
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--threads", type=int)
        if data:
            sp.add_argument("--input", help="dataset CSV (items, Y, optional PART)")
            sp.add_argument("--items", help="'auto', a preset name, or omit to detect")

    def turnover_flags(sp):
        sp.add_argument("--tau", type=float)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--kappa", type=float)
        sp.add_argument("--parent-rule", dest="parent_rule", choices=PARENT_RULES)
        sp.add_argument("--coding-red-to-blue", dest="coding_red_to_blue", choices=CODINGS)
        sp.add_argument("--coding-blue-to-red", dest="coding_blue_to_red", choices=CODINGS)
        sp.add_argument("--ordering", choices=ORDERINGS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--tiering", dest="tiering.enabled", action=argparse.BooleanOptionalAction, default=None)

    a = sub.add_parser("analyze", help="run both turnover directions on a dataset")
    common(a)
    turnover_flags(a)

    s = sub.add_parser("simulate", help="run a simulation experiment grid")
    common(s, data=False)
    turnover_flags(s)
    s.add_argument("--mode", choices=SIM_MODES)
    s.add_argument("--ns", type=_csv_list(int))
    s.add_argument("--target-masses", dest="target_masses", type=_csv_list(float))
    s.add_argument("--shapes", type=_csv_list(str))
    s.add_argument("--replications", type=int)

    e = sub.add_parser("evaluate", help="score cutoffs versus a subgroup rule")
    common(e)
    e.add_argument("--corners")
    e.add_argument("--cutoffs", type=_csv_list(int))
    e.add_argument("--digits", type=int)

    u = sub.add_parser("upset-data", help="combination and marginal counts")
    common(u)
    u.add_argument("--top", type=int)

    c = sub.add_parser("corners-count", help="count profiles covered by a corner set")
    c.add_argument("--config")
    c.add_argument("--out-dir", dest="out_dir")
    c.add_argument("--corners")
    c.add_argument("--lift-to", dest="lift_to", help="'ace' or a grid/corners JSON to lift onto")
    return p


def run(argv=None) -> dict:
    args = build_parser().parse_args(argv)
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    file_cfg = load_config(args.config) if args.config else {}
    cfg = merge_config(args.command, file_cfg, flags)
    return COMMANDS[args.command](cfg)


def main(argv=None) -> int:
    try:
        res = run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except CalibrationError as exc:
        print(f"calibration error: {exc} (max attainable mass {exc.max_mass})", file=sys.stderr)
        return EXIT_CALIBRATION
    except InputError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(_json_safe(res if "results" not in res else {"outputs": res.get("outputs")}),
                     sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
