"""Command-line entry point: ``timingsim <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import eventlink, rtdl
from .codes import EventCode, code_name
from .config import ConfigError, Scenario, builtin_names, resolve, to_dict
from .harness import InvariantViolation, compare_delay_modes, resolve_coupling, run, sweep, validate, write_outputs, base_ring_period
from .mtg import CalibrationError

log = logging.getLogger("timingsim")

EXIT_OK = 0
EXIT_CHECKS_FAILED = 1
EXIT_INVALID = 2


def _parse_int(text: str) -> int:
    return int(text, 0)


def _parse_code(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        try:
            return int(EventCode[text.upper()])
        except KeyError:
            raise ValueError(f"unknown event code {text!r}") from None


def _load(args) -> Scenario:
    sc = resolve(args.config)
    if getattr(args, "cycles", None) is not None:
        sc = sc.replace(cycles=args.cycles)
    if getattr(args, "seed", None) is not None:
        sc = sc.replace(seed=args.seed)
    if getattr(args, "link_mode", None) is not None:
        sc = sc.replace(link_mode=args.link_mode)
    return sc


# -- commands --------------------------------------------------------------------


def cmd_scenarios(args) -> int:
    for name in builtin_names():
        print(f"builtin:{name}")
    return EXIT_OK


def cmd_validate(args) -> int:
    sc = _load(args)
    validate(sc)
    print(f"{sc.name}: ok ({sc.cycles} cycles, ring period {base_ring_period(sc)} ps)")
    if args.show:
        print(json.dumps(to_dict(sc), indent=2, default=str))
    return EXIT_OK


def _run_one(sc, out: Optional[Path], plots: bool) -> dict:
    result = run(sc)
    if out is not None:
        write_outputs(result, out, plots=plots)
    return result.summary


def cmd_run(args) -> int:
    refs = args.config
    scenarios = []
    for ref in refs:
        args.config = ref
        scenarios.append(_load(args))
    base = Path(args.out) if args.out else None
    multi = len(scenarios) > 1

    def job(sc):
        out = None if base is None else (base / sc.name if multi else base)
        return _run_one(sc, out, args.plots)

    if args.jobs > 1 and multi:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            summaries = list(pool.map(job, scenarios))
    else:
        summaries = [job(sc) for sc in scenarios]

    ok = True
    for s in summaries:
        ok &= s["passed"]
        print(
            f"{s['scenario']}: {s['cycles']} cycles, coupling {s['coupling']:.5g}, "
            f"sigma {s['deviation_std_ps'] / 1e6:.2f} us, max |dev| {s['deviation_max_abs_ps'] / 1e6:.2f} us, "
            f"sync lost {s['sync_lost_count']}"
        )
        for name, c in s["choppers"].items():
            mx = c["max_abs_error_ps"]
            print(f"  chopper {name}: max post-lock error {'-' if mx is None else f'{mx / 1e6:.3f} us'}, clamps {c['clamp_events']}")
        for name, passed in s["checks"].items():
            print(f"  {'PASS' if passed else 'FAIL'} {name}")
    return EXIT_OK if ok else EXIT_CHECKS_FAILED


def cmd_compare(args) -> int:
    if args.config:
        nominal = base_ring_period(_load(args))
    else:
        nominal = args.period
    deltas = args.delta if args.delta else sweep(args.span, args.steps)
    rep = compare_delay_modes(nominal, deltas, args.turns)
    if args.json:
        print(json.dumps(rep, indent=2))
    else:
        print(f"nominal period {nominal} ps, trigger at turn {args.turns}")
        print(f"{'delta_ps':>10} {'fixed_err_ps':>14} {'tick_err_ps':>12}")
        for r in rep["rows"]:
            print(f"{r['delta_ps']:>10} {r['fixed_error_ps']:>14} {r['tick_error_ps']:>12}")
        print(f"fixed-delay error span {rep['fixed_error_span_ps']} ps; tick-delay max |error| {rep['tick_error_max_abs_ps']} ps")
    return EXIT_OK if rep["tick_error_max_abs_ps"] == 0 else EXIT_CHECKS_FAILED


def cmd_calibrate(args) -> int:
    sc = _load(args)
    if args.target_us is not None:
        sc = sc.with_section("mtg", target_sigma_ps=args.target_us * 1e6, coupling=None)
    if sc.mtg.target_sigma_ps is None:
        raise ConfigError("mtg", "calibrate needs target_sigma_ps (or --target-us)")
    k, kf = resolve_coupling(sc)
    print(f"coupling {k:.6g}  coupling_freq {kf:.6g}  (target sigma {sc.mtg.target_sigma_ps / 1e6:g} us)")
    return EXIT_OK


def _read_schedule(path: str) -> list[tuple[int, int]]:
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{path}:{n}: expected 'tick code'")
        out.append((int(parts[0], 0), _parse_code(parts[1])))
    return out


def cmd_el_encode(args) -> int:
    events = _read_schedule(args.schedule)
    stream = eventlink.encode(events, n_cells=args.cells)
    with open(args.output, "wb") as fh:
        stream.write(fh)
    print(f"{len(events)} events, {stream.n_cells} cells -> {args.output}")
    return EXIT_OK


def cmd_el_decode(args) -> int:
    with open(args.input, "rb") as fh:
        stream = eventlink.Bitstream.read(fh)
    res = eventlink.decode(stream)
    for tick, code in res.events:
        print(f"{tick}\t0x{code:02X}\t{code_name(code)}")
    for err in res.errors:
        print(f"# error cell {err.tick}: {err.kind}: {err.detail}", file=sys.stderr)
    return EXIT_OK if not res.errors else EXIT_CHECKS_FAILED


def cmd_rtdl_build(args) -> int:
    frames = []
    for n, line in enumerate(Path(args.frames).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise ValueError(f"{args.frames}:{n}: expected 'address data'")
        frames.append(rtdl.RtdlFrame(_parse_int(parts[0]), _parse_int(parts[1])))
    Path(args.output).write_bytes(rtdl.encode_frames(frames))
    print(f"{len(frames)} frames -> {args.output}")
    return EXIT_OK


def cmd_rtdl_dump(args) -> int:
    frames, errors = rtdl.decode_frames(Path(args.input).read_bytes())
    for f in frames:
        desc = rtdl.DEFAULT_REGISTRY.get(f.address, "unregistered")
        print(f"0x{f.address:02X}\t0x{f.data:06X}\t{f.data}\t{desc}")
    for off, reason in errors:
        print(f"# error at byte {off}: {reason}", file=sys.stderr)
    return EXIT_OK if not errors else EXIT_CHECKS_FAILED


# -- parser ----------------------------------------------------------------------


def _scenario_flags(p: argparse.ArgumentParser, required: bool = True, multiple: bool = False) -> None:
    help_ = "scenario YAML path or builtin:NAME"
    if multiple:
        p.add_argument("--config", action="append", required=required, help=help_ + " (repeatable)")
    else:
        p.add_argument("--config", required=required, help=help_)
    p.add_argument("--cycles", type=int, help="override cycle count")
    p.add_argument("--seed", type=int, help="override scenario seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="timingsim", description="Beam-synchronous timing system simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scenarios", help="list built-in scenarios")
    p.set_defaults(func=cmd_scenarios)

    p = sub.add_parser("validate", help="check a scenario without running it")
    _scenario_flags(p)
    p.add_argument("--show", action="store_true", help="print the resolved configuration")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run scenario(s) and write outputs")
    _scenario_flags(p, multiple=True)
    p.add_argument("--out", help="output directory (events.log, metrics.csv, summary.json)")
    p.add_argument("--format", choices=["csv"], default="csv", help="metrics table format")
    p.add_argument("--plots", action="store_true", help="also write SVG plots")
    p.add_argument("--link-mode", choices=["bitstream", "direct"])
    p.add_argument("--jobs", type=int, default=1, help="worker threads for several scenarios")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare-delay-modes", help="fixed-ps versus tick-counted trigger delays")
    _scenario_flags(p, required=False)
    p.add_argument("--period", type=int, default=945_388, help="nominal ring period in ps (without --config)")
    p.add_argument("--turns", type=int, default=1060)
    p.add_argument("--span", type=int, default=1000, help="sweep +-span ps")
    p.add_argument("--steps", type=int, default=21)
    p.add_argument("--delta", type=int, action="append", help="explicit period change(s) in ps")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("calibrate", help="search the PLL coupling for a target sigma")
    _scenario_flags(p)
    p.add_argument("--target-us", type=float, help="override target sigma in us")
    p.set_defaults(func=cmd_calibrate)

    el = sub.add_parser("eventlink", help="event-link bitstream file tools").add_subparsers(dest="el_cmd", required=True)
    p = el.add_parser("encode", help="schedule text (tick code per line) -> .evlk")
    p.add_argument("schedule")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--cells", type=int, help="total stream length in cells")
    p.set_defaults(func=cmd_el_encode)
    p = el.add_parser("decode", help=".evlk -> events")
    p.add_argument("input")
    p.set_defaults(func=cmd_el_decode)

    rt = sub.add_parser("rtdl", help="RTDL frame file tools").add_subparsers(dest="rtdl_cmd", required=True)
    p = rt.add_parser("build", help="text (address data per line) -> frame file")
    p.add_argument("frames")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_rtdl_build)
    p = rt.add_parser("dump", help="frame file -> text")
    p.add_argument("input")
    p.set_defaults(func=cmd_rtdl_dump)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CalibrationError, eventlink.EncodeError, rtdl.RtdlError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
