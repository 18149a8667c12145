"""Command-line front end: run scenarios, scan images, drive the
defense matrix, emit payload files.

Exit code contract, kept machine-friendly so CI can assert on it:

* 0: the command ran and the result is the expected one
* 1: usage or configuration problem (bad flags, missing or malformed
  files, unknown names)
* 2: the command ran but the result is not the expected one (attack
  outcome differs from the scenario's expectation, matrix grid differs
  from the shipped table)

Reports go to standard output as JSON; diagnostics go to standard
error. ``TZM_SEED`` overrides the seeds a scenario file declares.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import attacks, defense, scanner, victims
from .memory import MapError, map_from_manifest

PACKAGE_DIR = Path(__file__).parent
SCENARIO_DIR = PACKAGE_DIR / "scenarios"
EXPECTED_MATRIX = PACKAGE_DIR / "fixtures" / "expected_matrix.json"

_USAGE_EXIT = 1
_MISMATCH_EXIT = 2


class ConfigError(Exception):
    """Bad input from the command line or a scenario file."""


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; usage problems are exit 1 here
    def error(self, message):
        self.exit(_USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return _USAGE_EXIT


def _emit(report: dict) -> None:
    json.dump(report, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _load_json(path: str, what: str) -> dict:
    try:
        with open(path, "rb") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path!r}: {exc.strerror}")
    except ValueError as exc:
        raise ConfigError(f"malformed {what} {path!r}: {exc}")


# --- scenarios ----------------------------------------------------------

_SCENARIO_ATTACKS = attacks.ATTACK_NAMES + ("scan",)


def load_scenario(path) -> dict:
    sc = _load_json(str(path), "scenario")
    if not isinstance(sc, dict):
        raise ConfigError(f"scenario {path!r} is not an object")
    profile = sc.get("profile")
    if not isinstance(profile, dict):
        raise ConfigError("scenario needs a profile object")
    attack = sc.get("attack")
    if not isinstance(attack, dict) or "name" not in attack:
        raise ConfigError("scenario needs an attack object with a name")
    if attack["name"] not in _SCENARIO_ATTACKS:
        raise ConfigError(f"unknown attack {attack['name']!r}; know "
                          + ", ".join(_SCENARIO_ATTACKS))
    for d in sc.get("defenses", []):
        if d not in defense.DEFENSES:
            raise ConfigError(f"unknown defense {d!r}; know "
                              + ", ".join(defense.DEFENSES))
    for field in ("budget", "restart_cap"):
        if field in sc and (not isinstance(sc[field], int) or sc[field] <= 0):
            raise ConfigError(f"{field} must be a positive integer")
    try:
        victims.check_profile(profile)
    except victims.ProfileError as exc:
        raise ConfigError(f"bad profile: {exc}")
    sc.setdefault("name", Path(path).stem)
    return sc


def bundled_scenarios() -> list:
    return [load_scenario(p) for p in sorted(SCENARIO_DIR.glob("*.json"))]


def _scenario_seed(sc: dict):
    env = os.environ.get("TZM_SEED")
    if env is not None:
        try:
            return int(env, 0)
        except ValueError:
            raise ConfigError(f"TZM_SEED is not an integer: {env!r}")
    seeds = sc.get("seeds") or {}
    return seeds.get("filler")


def _run_scenario(sc: dict, extra_defenses=()) -> tuple:
    """Build the image, run the attack, return (report_dict, machine)."""
    profile = dict(sc["profile"])
    chosen = sorted(set(profile.pop("defenses", []))
                    | set(sc.get("defenses", [])) | set(extra_defenses))
    try:
        image = defense.build_defended(profile, chosen)
    except (ValueError, victims.ProfileError) as exc:
        raise ConfigError(str(exc))

    name = sc["attack"]["name"]
    params = {k: v for k, v in sc["attack"].items() if k != "name"}
    if "budget" in sc:
        params.setdefault("budget", sc["budget"])
    seed = _scenario_seed(sc)
    if seed is not None and name == "injection":
        params["seed"] = seed
    try:
        if name == "scan":
            if "span" in params:
                params["span"] = tuple(params["span"])
            cap = sc.get("restart_cap")
            if cap is not None:
                lo, hi = params.get("span",
                                    (victims.SP_NS_TOP - 0x200,
                                     victims.SP_NS_TOP))
                stride = params.get("stride", 2)
                params["span"] = (lo, min(hi, lo + stride * cap))
            rep = attacks.scan_injection(image, **params)
        else:
            rep = attacks.run_attack(name, image, **params)
    except TypeError as exc:
        raise ConfigError(f"bad attack parameters: {exc}")
    report = {"scenario": sc["name"], "defenses": chosen}
    report.update(rep.as_dict())
    return report, image.machine


def _expected_outcomes(sc: dict, defenses) -> set:
    expect = sc.get("expect")
    if expect is not None:
        return {expect} if isinstance(expect, str) else set(expect)
    if defenses:
        # a defended run is expected to be stopped; any refusal counts
        return {"mem_fault", "cfi_violation", "range_check",
                "format_sanitized", "no_effect"}
    return {"success"}


def cmd_run(args) -> int:
    try:
        sc = load_scenario(args.scenario)
        extra = [d for part in args.defense for d in part.split(",") if d]
        for d in extra:
            if d not in defense.DEFENSES:
                raise ConfigError(f"unknown defense {d!r}")
        report, machine = _run_scenario(sc, extra)
    except ConfigError as exc:
        return _fail(str(exc))
    if args.trace:
        trace = [{"cycle": t.cycle, "src": t.src.value, "dst": t.dst.value,
                  "pc": t.pc, "via": t.via} for t in machine.transitions]
        Path(args.trace).write_text(json.dumps(trace, indent=2) + "\n")
    _emit(report)
    expected = _expected_outcomes(sc, report["defenses"])
    if report["outcome"] in expected:
        return 0
    print(f"unexpected outcome {report['outcome']!r} "
          f"(expected one of {sorted(expected)})", file=sys.stderr)
    return _MISMATCH_EXIT


# --- static scanning ----------------------------------------------------

def cmd_scan(args) -> int:
    try:
        data = Path(args.image).read_bytes()
    except OSError as exc:
        return _fail(f"cannot read image {args.image!r}: {exc.strerror}")
    memmap = None
    base = args.base
    if args.map:
        try:
            memmap = map_from_manifest(_load_json(args.map, "manifest"))
        except ConfigError as exc:
            return _fail(str(exc))
        except MapError as exc:
            return _fail(f"bad manifest: {exc}")
        if base is None:
            execs = sorted(r.base for r in memmap.regions if r.x)
            base = execs[0] if execs else 0
    if base is None:
        base = 0

    report = scanner.scan_report(data, base, memmap,
                                 max_len=args.max_gadget_len)
    report = {"image": args.image, "base": base, "size": len(data),
              **report}
    if args.summary:
        print(f"image {args.image}: {len(data)} bytes at 0x{base:x}")
        print(f"instructions {report['total']} "
              f"(unknown {report['unknown']})")
        print(f"pop-pc {report['pop_pc']}  bx-lr {report['bx_lr']}")
        print(f"density {scanner.format_density(report['density'])}")
        print(f"gadgets {len(report['gadgets'])} "
              f"(max length {args.max_gadget_len})")
        print(f"nsc-entries {len(report['nsc_entries'])}  "
              f"jmp-sp {len(report['jmp_sp'])}")
    else:
        _emit(report)
    return 0


# --- the matrix ---------------------------------------------------------

def _matrix_rows(scenarios) -> list:
    rows = []
    for sc in scenarios:
        name = sc["attack"]["name"]
        if name != "scan":
            rows.append((sc["name"], sc))
    return rows


def _alias(name: str, candidates) -> str:
    if name in candidates:
        return name
    hits = [c for c in candidates if c.startswith(name)]
    if len(hits) == 1:
        return hits[0]
    raise ConfigError(f"ambiguous or unknown name {name!r}; know "
                      + ", ".join(candidates))


def cmd_matrix(args) -> int:
    try:
        expected = _load_json(args.expect, "expectation table")
        scenarios = _matrix_rows(bundled_scenarios())
        attack_names = [sc["attack"]["name"] for _, sc in scenarios]
        want_attack = (_alias(args.attack, attack_names)
                       if args.attack else None)
        want_column = (_alias(args.defense, defense.MATRIX_COLUMNS)
                       if args.defense else None)
    except ConfigError as exc:
        return _fail(str(exc))

    columns = [want_column] if want_column else list(defense.MATRIX_COLUMNS)
    grid: dict = {}
    for _, sc in scenarios:
        name = sc["attack"]["name"]
        if want_attack and name != want_attack:
            continue
        row = {}
        for column in columns:
            bare = dict(sc)
            bare["defenses"] = []
            try:
                report, _ = _run_scenario(
                    bare, defense.column_defenses(column))
            except ConfigError as exc:
                return _fail(str(exc))
            row[column] = report["outcome"]
        grid[name] = row

    report = {"columns": columns, "grid": grid}
    _emit(report)
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")

    diffs = []
    for name, row in grid.items():
        for column, outcome in row.items():
            want = expected.get(name, {}).get(column)
            if outcome != want:
                diffs.append(f"{name}/{column}: got {outcome!r} "
                             f"expected {want!r}")
    if diffs:
        for line in diffs:
            print(line, file=sys.stderr)
        return _MISMATCH_EXIT
    return 0


# --- payload files ------------------------------------------------------

def _build_payload(args):
    if args.attack == "injection":
        return attacks.injection_payload(
            args.buffer_len, args.entry, sled_len=args.sled_len,
            layout=(attacks.Layout.CLASSIC if args.classic
                    else attacks.Layout.ENTRY_AT_BOTTOM),
            seed=args.seed)
    if args.attack == "rop":
        image = victims.build(attacks.ATTACK_PROFILES["rop"])
        _, payload = attacks.discover_demo_chain(image)
        return payload
    if args.attack == "fmt":
        return attacks.build_format_leak(args.words)
    if args.attack == "heap_fnptr":
        return attacks.build_heap_overflow(
            attacks.FnPtrOverwrite(args.slot_offset, args.target))
    return attacks.build_heap_overflow(
        attacks.Unlink(args.where, args.what))


def cmd_payload(args) -> int:
    try:
        payload = _build_payload(args)
    except (attacks.PayloadError, attacks.ChainError) as exc:
        return _fail(str(exc))
    Path(args.out).write_bytes(payload.data)
    meta = {k: v for k, v in payload.meta.items()
            if isinstance(v, (int, str, list, tuple))}
    _emit({"attack": args.attack, "out": args.out,
           "payload_len": len(payload),
           "layout": payload.layout.name if payload.layout else None,
           "meta": meta})
    return 0


# --- argument plumbing --------------------------------------------------

def _hex_int(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tzmlab",
                     description="TrustZone-M attack and defense lab")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one scenario file")
    run.add_argument("scenario")
    run.add_argument("--defense", action="append", default=[],
                     metavar="D1,D2",
                     help="extra defenses on top of the scenario's list")
    run.add_argument("--trace", metavar="PATH",
                     help="write the world-transition log as JSON")
    run.set_defaults(func=cmd_run)

    scan = sub.add_parser("scan", help="static scan of a firmware image")
    scan.add_argument("image")
    scan.add_argument("--map", metavar="JSON",
                      help="memory manifest for attribute-aware scanning")
    scan.add_argument("--base", type=_hex_int,
                      help="load address (default: lowest executable "
                           "region of the map, else 0)")
    scan.add_argument("--max-gadget-len", type=int,
                      default=scanner.DEFAULT_MAX_GADGET_LEN)
    scan.add_argument("--summary", action="store_true",
                      help="print a census summary instead of JSON")
    scan.set_defaults(func=cmd_scan)

    matrix = sub.add_parser(
        "matrix", help="attack/defense grid over the bundled scenarios")
    matrix.add_argument("--out", metavar="PATH",
                        help="also write the grid to this file")
    matrix.add_argument("--attack", help="restrict to one attack row")
    matrix.add_argument("--defense", help="restrict to one defense column")
    matrix.add_argument("--expect", default=str(EXPECTED_MATRIX),
                        help=argparse.SUPPRESS)
    matrix.set_defaults(func=cmd_matrix)

    payload = sub.add_parser("payload", help="write attack payload bytes")
    psub = payload.add_subparsers(dest="attack", required=True)

    inj = psub.add_parser("injection")
    inj.add_argument("--buffer-len", type=int,
                     default=victims.DEFAULT_BUFFER_LEN)
    inj.add_argument("--entry", type=_hex_int, required=True)
    inj.add_argument("--sled-len", type=int, default=50)
    inj.add_argument("--classic", action="store_true",
                     help="full-word entry slot at the end")
    inj.add_argument("--seed", type=_hex_int,
                     default=attacks.FILLER_SEED)
    psub.add_parser("rop")
    fmt = psub.add_parser("fmt")
    fmt.add_argument("--words", type=int, default=5)
    hf = psub.add_parser("heap_fnptr")
    hf.add_argument("--slot-offset", type=int, default=24)
    hf.add_argument("--target", type=_hex_int,
                    default=victims.BLOB_BASE)
    hu = psub.add_parser("heap_unlink")
    hu.add_argument("--where", type=_hex_int, required=True)
    hu.add_argument("--what", type=_hex_int, default=0xDEADBEEF)
    for p in psub.choices.values():
        p.add_argument("--out", required=True, metavar="BIN")
    payload.set_defaults(func=cmd_payload)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 0
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
