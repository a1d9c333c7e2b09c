"""
Scenario runner: wires grid, master timing generator, links and clients,
runs N machine cycles through the event engine and collects per-cycle
metrics plus a summary with pass/fail checks.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import eventlink
from .clients import (
    REQUIRED_ACCURACY_PS,
    DESIRED_ACCURACY_PS,
    BeamGateProgram,
    ChopperDriver,
    ChopperRotor,
    KlystronWindow,
    UtilityModule,
)
from .codes import LINK_CODES, EventCode
from .config import ConfigError, Scenario, validate_static
from .grid import Grid, period_ps
from .mtg import (
    CALIBRATION_TOLERANCE,
    MtgConfigError,
    PhaseOrigin,
    RingRf,
    SyncStatus,
    calibrate_coupling,
    check_sync,
    cycle_events,
    default_coupling_freq,
    pll_init,
    pll_update,
    schedule_cycle,
)
from .ring import CARRIER_PER_TURN, RingParams, RingRangeError, revolution_period
from .rtdl import (
    ADDR_PHASE_DIFF,
    ADDR_RESET,
    ADDR_RING_PERIOD,
    ADDR_TOD_HI,
    ADDR_TOD_LO,
    CycleClock,
    EncoderList,
    broadcast_cycle,
    encode_frame,
    encode_phase_diff,
    join_tod,
    split_tod,
    timestamp_now,
    unpack_payload,
)
from .simcore import PS_PER_S, Engine, TimedEvent

log = logging.getLogger(__name__)

# idle cells kept between frames when a cycle's link traffic is packed for decoding
LINK_IDLE_PAD = 16


class InvariantViolation(RuntimeError):
    pass


@dataclass
class RunResult:
    scenario: Scenario
    engine: Engine
    metrics: list[dict]
    summary: dict
    modules: list[UtilityModule] = field(default_factory=list)
    choppers: list[ChopperDriver] = field(default_factory=list)
    schedules: list = field(default_factory=list)

    def event_log_text(self) -> str:
        buf = io.StringIO()
        self.engine.write_log(buf)
        return buf.getvalue()

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        if self.metrics:
            w = csv.DictWriter(buf, fieldnames=list(self.metrics[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(self.metrics)
        return buf.getvalue()

    @property
    def passed(self) -> bool:
        return self.summary["passed"]


def resolve_coupling(sc: Scenario) -> tuple[float, float]:
    m = sc.mtg
    if m.coupling is not None:
        k = m.coupling
    else:
        k = calibrate_coupling(
            _grid_params(sc), float(m.target_sigma_ps), cycles=m.calibration_cycles, seed=m.calibration_seed
        )
    kf = m.coupling_freq if m.coupling_freq is not None else default_coupling_freq(k)
    return k, kf


def _grid_params(sc: Scenario):
    if sc.grid_seed_explicit:
        return sc.grid
    return dataclasses.replace(sc.grid, seed=sc.seed)


def base_ring_period(sc: Scenario) -> int:
    return revolution_period(RingParams(sc.ring.circumference_m, sc.ring.kinetic_energy_mev))


def validate(sc: Scenario) -> None:
    """Cross-module checks, run before any cycle."""
    validate_static(sc)
    try:
        base = base_ring_period(sc)
    except RingRangeError as exc:
        raise ConfigError("ring", str(exc)) from None
    # dry-run the extreme periods through the scheduler and the link encoder
    for period in {base - sc.ring.period_variation_ps, base + sc.ring.period_variation_ps}:
        try:
            sched = schedule_cycle(0, 10 * PS_PER_S, period, sc.mtg, sc.rtdl.lead_ps)
        except MtgConfigError as exc:
            raise ConfigError("mtg", str(exc)) from None
        if not (sched.t_cycle_start < sched.t_diag_pretrig and sched.t_cycle_start < sched.t_klystron):
            raise ConfigError("mtg", "klystron gate or diagnostics pretrigger would precede Cycle Start")
        lost = SyncStatus(0, 0, False, 1, 0)
        try:
            traffic = [(sched.tick_of(e.at), e.code) for e in cycle_events(sched, lost)]
            _, rel = eventlink.link_window(traffic)
            eventlink.encode(rel)
        except eventlink.EncodeError as exc:
            raise ConfigError("mtg", f"event-link traffic does not fit: {exc}") from None


def _pack_traffic(traffic: list[tuple[int, int]]) -> tuple[list[tuple[int, int]], dict[int, int]]:
    """Shorten idle stretches between frames; returns packed events and packed->absolute tick map."""
    packed, back = [], {}
    pos = LINK_IDLE_PAD
    prev = None
    for tick, code in sorted(traffic):
        if prev is not None:
            pos += min(tick - prev, eventlink.FRAME_CELLS + LINK_IDLE_PAD)
        packed.append((pos, code))
        back[pos] = tick
        prev = tick
    return packed, back


def _make_modules(sc: Scenario) -> list[UtilityModule]:
    return [UtilityModule(m.name, m.reset_address, frozenset(m.interrupts)) for m in sc.clients.utility_modules]


def _make_choppers(sc: Scenario) -> list[ChopperDriver]:
    out = []
    for spec in sc.clients.choppers:
        kw = {k: getattr(spec, k) for k in ("alpha_max", "kp", "ki", "kd") if getattr(spec, k) is not None}
        rotor = ChopperRotor.for_kind(spec.name, spec.kind, spec.harmonic, **kw)
        out.append(ChopperDriver(rotor, sc.clients.chopper_substeps, sc.clients.lock_cycles))
    return out


def run(sc: Scenario, *, keep_log: bool = True, coupling: Optional[tuple[float, float]] = None) -> RunResult:
    validate(sc)
    kappa, kappa_f = coupling if coupling is not None else resolve_coupling(sc)
    gp = _grid_params(sc)
    grid = Grid(gp)
    pll = pll_init(gp, kappa, kappa_f)
    engine = Engine(keep_log=keep_log)
    base_period = base_ring_period(sc)
    var_rng = np.random.default_rng([sc.seed, 0x52494E47])
    encoder = EncoderList(sc.rtdl.encoder_list)
    resets = {int(e["cycle"]): int(e["address"]) for e in sc.rtdl.reset_schedule}
    modules = _make_modules(sc)
    choppers = _make_choppers(sc)
    klystron = KlystronWindow(sc.mtg.threshold_ps)
    ringrf = RingRf()
    clock = CycleClock()
    link_mode = sc.link_mode

    # client wiring
    def on_link(ev: TimedEvent) -> None:
        for m in modules:
            m.on_event(ev)

    def on_frame(ev: TimedEvent) -> None:
        raw = encode_frame(unpack_payload(ev.payload))
        for m in modules:
            m.receive_rtdl(raw, ev.at)
        cycle_frames.append(ev)

    def on_cycle_start(ev: TimedEvent) -> None:
        mem = modules[0].rtdl_memory if modules else None
        if mem is not None and ADDR_TOD_HI in encoder.addresses and ADDR_TOD_LO in encoder.addresses:
            clock.latch(join_tod(mem[ADDR_TOD_HI], mem[ADDR_TOD_LO]), ev.payload, ev.at, mem[ADDR_RING_PERIOD] or base_period)
        cs_seen.append(ev.at)

    def on_extraction(ev: TimedEvent) -> None:
        ringrf.extract(ev.at)

    def on_injection(ev: TimedEvent) -> None:
        ringrf.begin_injection(ev.at)

    engine.subscribe(on_link, LINK_CODES)
    engine.subscribe(on_frame, [EventCode.RTDL_FRAME])
    engine.subscribe(on_cycle_start, [EventCode.CYCLE_START])
    engine.subscribe(on_injection, [EventCode.INJECTION_START])
    engine.subscribe(on_extraction, [EventCode.EXTRACTION])

    crossings: deque = deque(maxlen=4)
    upcoming = grid.next_zero_crossing()
    prev_sync: Optional[SyncStatus] = None
    metrics: list[dict] = []
    schedules = []
    link_errors_total = 0
    link_mismatch = 0
    max_spacing = gp.spacing_bounds()[1] + max((abs(int(t.magnitude)) for t in gp.transients if t.kind == "phase-step"), default=0)

    for k in range(sc.cycles):
        zc = upcoming
        upcoming = grid.next_zero_crossing()
        crossings.append(zc.at)
        engine.post(zc.at, EventCode.ZERO_CROSSING, zc.cycle_index, "grid")
        pll, reference = pll_update(pll, zc)

        offset = int(var_rng.integers(-sc.ring.period_variation_ps, sc.ring.period_variation_ps + 1)) if sc.ring.period_variation_ps else 0
        ring_period = base_period + offset
        sched = schedule_cycle(k, reference, ring_period, sc.mtg, sc.rtdl.lead_ps)
        sync = check_sync(sched, list(crossings) + [upcoming.at], sc.mtg.threshold_ps, prev_sync, max_spacing)
        prev_sync = sync
        origin = ringrf.reset(sched.t_cycle_start, ring_period, k)

        # RTDL broadcast
        tod = sc.rtdl.tod_epoch_s + sched.t_rtdl_start // PS_PER_S
        hi, lo = split_tod(tod)
        values = dict(sc.rtdl.static_values)
        values.update({
            ADDR_TOD_HI: hi,
            ADDR_TOD_LO: lo,
            ADDR_RING_PERIOD: ring_period,
            ADDR_PHASE_DIFF: encode_phase_diff(sync.deviation),
            ADDR_RESET: resets.get(k, 0),
        })
        values = {a: values.get(a, 0) for a in encoder.addresses}
        cycle_frames: list[TimedEvent] = []
        cs_seen: list[int] = []
        for ev in broadcast_cycle(encoder, values, sched.t_rtdl_start, sched.t_cycle_start, sc.rtdl.bitrate):
            engine.schedule(ev)

        # event link
        planned = cycle_events(sched, sync)
        link_err = 0
        if link_mode == "bitstream":
            traffic = [(sched.tick_of(e.at), e.code) for e in planned]
            packed, back = _pack_traffic(traffic)
            res = eventlink.decode(eventlink.encode(packed))
            link_err = len(res.errors)
            got = [(back.get(t, -1), c) for t, c in res.events]
            if got != sorted(traffic):
                link_mismatch += 1
            for tick, code in got:
                engine.post(sched.tick_instant(tick), code, k, "eventlink")
        else:
            for ev in planned:
                engine.schedule(dataclasses.replace(ev, payload=k))
        link_errors_total += link_err

        end = sched.t_extraction + sched.ring_period
        engine.run_until(end)
        if ringrf.cycle_open:
            raise InvariantViolation(f"cycle {k}: ring still open after extraction")

        # per-cycle client metrics
        kly = klystron.check(k, sync.deviation)
        if kly.passed != sync.in_sync:
            raise InvariantViolation(f"cycle {k}: klystron window disagrees with sync status")
        injection_fire = eventlink.arm_delay(
            eventlink.DelayCounter(EventCode.CYCLE_START, CARRIER_PER_TURN * (sched.n_cs - sched.fill_turns)),
            origin,
            sched.t_cycle_start,
        )
        gate = BeamGateProgram.for_period(ring_period, sc.clients.gap_ns, sched.fill_turns)
        gap_align = gate.alignment(sched.t_extraction, gate.origin(injection_fire, ring_period), ring_period)
        # same gate timed in fixed ps from the nominal period
        fixed_inj = sched.t_cycle_start + (sched.n_cs - sched.fill_turns) * base_period
        fixed_origin = Fraction(fixed_inj) - Fraction(gate.gap_ticks * base_period, 2 * CARRIER_PER_TURN)
        fixed_align = gate.alignment(sched.t_extraction, fixed_origin, base_period)

        rtdl_ok = bool(cs_seen) and all(f.at < cs_seen[0] for f in cycle_frames) and len(cycle_frames) == len(encoder.addresses)
        coherent = all(m.rtdl_memory[a] == values[a] for m in modules for a in encoder.addresses)
        if clock.cycle_index == k:
            ts = timestamp_now(clock, sched.t_extraction)
            tod_s, frac = ts.tod_seconds, ts.fraction_ticks
        else:
            tod_s, frac = -1, -1

        row = {
            "cycle_index": k,
            "t_zero_crossing_ps": zc.at,
            "t_cycle_start_ps": sched.t_cycle_start,
            "t_extraction_ps": sched.t_extraction,
            "ring_period_ps": ring_period,
            "deviation_ps": sync.deviation,
            "in_sync": int(sync.in_sync),
            "sync_lost": int(not sync.in_sync),
            "klystron_pass": int(kly.passed),
            "klystron_margin_ps": kly.margin,
            "gap_alignment_ps": round(gap_align),
            "fixed_gap_alignment_ps": round(fixed_align),
            "tod_seconds": tod_s,
            "fraction_ticks": frac,
            "rtdl_before_cycle_start": int(rtdl_ok),
            "memory_coherent": int(coherent),
            "link_errors": link_err,
        }
        for drv in choppers:
            if k == 0:
                drv.start(sched.t_extraction, period_ps(gp.f_nominal))
                err = drv.advance_to(sched.t_extraction, k)
            else:
                err = drv.advance_to(sched.t_extraction, k)
            n = drv.rotor.name
            row[f"chopper_{n}_error_ps"] = err.time_error_ps
            row[f"chopper_{n}_locked"] = int(err.locked)
            row[f"chopper_{n}_clamps"] = drv.rotor.clamp_events
        metrics.append(row)
        schedules.append(sched)

    summary = summarize(sc, metrics, choppers, modules, kappa, kappa_f)
    summary["link_errors"] = link_errors_total
    summary["link_mismatched_cycles"] = link_mismatch
    summary["events_delivered"] = engine.delivered
    finalize_checks(sc, summary)
    return RunResult(sc, engine, metrics, summary, modules, choppers, schedules)


def summarize(sc, metrics, choppers, modules, kappa, kappa_f) -> dict:
    dev = np.array([r["deviation_ps"] for r in metrics], dtype=np.int64)
    s = {
        "scenario": sc.name,
        "cycles": len(metrics),
        "seed": sc.seed,
        "coupling": kappa,
        "coupling_freq": kappa_f,
        "deviation_mean_ps": float(dev.mean()),
        "deviation_std_ps": float(dev.std()),
        "deviation_max_abs_ps": int(np.abs(dev).max()),
        "sync_lost_count": int(sum(r["sync_lost"] for r in metrics)),
        "klystron_fail_count": int(sum(1 - r["klystron_pass"] for r in metrics)),
        "gap_alignment_max_abs_ps": int(max(abs(r["gap_alignment_ps"]) for r in metrics)),
        "fixed_gap_alignment_max_abs_ps": int(max(abs(r["fixed_gap_alignment_ps"]) for r in metrics)),
        "rtdl_ordering_ok": all(r["rtdl_before_cycle_start"] for r in metrics),
        "memory_coherent": all(r["memory_coherent"] for r in metrics),
        "timestamps_unique": len({(r["tod_seconds"], r["cycle_index"], r["fraction_ticks"]) for r in metrics}) == len(metrics)
        and all(r["tod_seconds"] >= 0 for r in metrics),
        "resets": {m.name: m.reset_asserted for m in modules},
        "interrupts": {m.name: len(m.interrupt_log) for m in modules},
        "choppers": {},
    }
    for drv in choppers:
        n = drv.rotor.name
        errs = [r[f"chopper_{n}_error_ps"] for r in metrics if r[f"chopper_{n}_locked"]]
        s["choppers"][n] = {
            "kind": drv.rotor.kind,
            "harmonic": drv.rotor.harmonic,
            "alpha_max": drv.rotor.alpha_max,
            "locked_at_cycle": drv.locked_at,
            "post_lock_cycles": len(errs),
            "max_abs_error_ps": max((abs(e) for e in errs), default=None),
            "desired_pass_rate": (sum(abs(e) <= DESIRED_ACCURACY_PS for e in errs) / len(errs)) if errs else None,
            "required_pass": bool(errs) and all(abs(e) <= REQUIRED_ACCURACY_PS for e in errs),
            "clamp_events": drv.rotor.clamp_events,
            "max_accel": drv.rotor.max_accel,
        }
    return s


def finalize_checks(sc: Scenario, s: dict) -> None:
    checks = {}
    enabled = set(sc.checks)
    if "deviation_window" in enabled:
        checks["deviation_window"] = s["deviation_max_abs_ps"] <= sc.mtg.threshold_ps
    if "sigma_target" in enabled and sc.mtg.target_sigma_ps is not None:
        t = sc.mtg.target_sigma_ps
        checks["sigma_target"] = abs(s["deviation_std_ps"] - t) <= CALIBRATION_TOLERANCE * t
    if "chopper_required" in enabled and s["choppers"]:
        checks["chopper_required"] = all(c["required_pass"] for c in s["choppers"].values())
    if "extraction_alignment" in enabled:
        checks["extraction_alignment"] = s["gap_alignment_max_abs_ps"] <= 5_000
    if "rtdl_ordering" in enabled:
        checks["rtdl_ordering"] = s["rtdl_ordering_ok"]
    if "memory_coherence" in enabled:
        checks["memory_coherence"] = s["memory_coherent"]
    if "timestamp_unique" in enabled:
        checks["timestamp_unique"] = s["timestamps_unique"]
    if "link_integrity" in enabled and sc.link_mode == "bitstream":
        checks["link_integrity"] = s["link_errors"] == 0 and s["link_mismatched_cycles"] == 0
    if "sync_lost_consistency" in enabled:
        checks["sync_lost_consistency"] = s["sync_lost_count"] == s["klystron_fail_count"]
    s["checks"] = checks
    s["passed"] = all(checks.values())


# -- delay-mode comparison --------------------------------------------------------


@dataclass(frozen=True)
class DelayComparison:
    delta_ps: int
    fixed_error_ps: int
    tick_error_ps: int


def compare_delay_modes(nominal_period: int, deltas: Sequence[int], turns: int = 1060, arm_at: int = 0) -> dict:
    """
    Fire a trigger ``turns`` turns after arming, once as a fixed delay
    computed from the nominal period and once as a carrier-tick counter on
    the actual (latched) period. Errors are fired instant minus the true
    instant of turn ``turns``.
    """
    rows = []
    for d in deltas:
        actual = nominal_period + d
        origin = PhaseOrigin(arm_at, actual, 0)
        truth = origin.turn_instant(turns)
        fixed = arm_at + turns * nominal_period
        tick = eventlink.arm_delay(eventlink.DelayCounter(EventCode.CYCLE_START, CARRIER_PER_TURN * turns), origin, arm_at)
        if tick.denominator != 1:
            raise InvariantViolation("tick-domain fire instant is not an integer ps")
        rows.append(DelayComparison(d, fixed - truth, int(tick) - truth))
    fixed_errs = [r.fixed_error_ps for r in rows]
    return {
        "nominal_period_ps": nominal_period,
        "turns": turns,
        "rows": [dataclasses.asdict(r) for r in rows],
        "fixed_error_span_ps": max(fixed_errs) - min(fixed_errs) if rows else 0,
        "fixed_error_max_abs_ps": max((abs(e) for e in fixed_errs), default=0),
        "tick_error_max_abs_ps": max((abs(r.tick_error_ps) for r in rows), default=0),
    }


def sweep(limit_ps: int = 1000, steps: int = 21) -> list[int]:
    if steps < 2:
        return [0]
    return [round(-limit_ps + 2 * limit_ps * i / (steps - 1)) for i in range(steps)]


# -- outputs ---------------------------------------------------------------------


def write_outputs(result: RunResult, out_dir: Path, plots: bool = False) -> dict[str, Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out_dir / "events.log",
        "metrics": out_dir / "metrics.csv",
        "summary": out_dir / "summary.json",
    }
    paths["events"].write_text(result.event_log_text())
    paths["metrics"].write_text(result.metrics_csv())
    paths["summary"].write_text(json.dumps(result.summary, indent=2, sort_keys=True) + "\n")
    if plots:
        paths.update(write_plots(result, out_dir))
    return paths


def write_plots(result: RunResult, out_dir: Path) -> dict[str, Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    m = result.metrics
    idx = [r["cycle_index"] for r in m]
    out = {}

    fig, ax = plt.subplots(figsize=(8, 3.5))
    ax.plot(idx, [r["deviation_ps"] / 1e6 for r in m], lw=0.7)
    thr = result.scenario.mtg.threshold_ps / 1e6
    ax.axhline(thr, color="r", ls="--", lw=0.8)
    ax.axhline(-thr, color="r", ls="--", lw=0.8)
    ax.set_xlabel("cycle")
    ax.set_ylabel("Cycle Start - zero crossing [us]")
    fig.tight_layout()
    out["plot_deviation"] = out_dir / "deviation.svg"
    fig.savefig(out["plot_deviation"], metadata={"Date": None})
    plt.close(fig)

    if result.choppers:
        fig, ax = plt.subplots(figsize=(8, 3.5))
        for drv in result.choppers:
            n = drv.rotor.name
            ax.plot(idx, [r[f"chopper_{n}_error_ps"] / 1e6 for r in m], lw=0.7, label=n)
        ax.axhline(0.5, color="orange", ls=":", lw=0.8)
        ax.axhline(-0.5, color="orange", ls=":", lw=0.8)
        ax.axhline(1.0, color="r", ls="--", lw=0.8)
        ax.axhline(-1.0, color="r", ls="--", lw=0.8)
        ax.set_xlabel("cycle")
        ax.set_ylabel("chopper time error at extraction [us]")
        ax.legend(loc="upper right", fontsize=8)
        fig.tight_layout()
        out["plot_choppers"] = out_dir / "choppers.svg"
        fig.savefig(out["plot_choppers"], metadata={"Date": None})
        plt.close(fig)
    return out
