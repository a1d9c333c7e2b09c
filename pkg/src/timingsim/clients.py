"""
Behavioural models of timing-system consumers.

UtilityModule   event interrupts, RTDL memory and remote reset of one IOC
ChopperRotor    high-inertia rotor phase-locked to the machine-cycle train
KlystronWindow  per-cycle grid-phase window check
BeamGateProgram per-turn LEBT/MEBT gate that carves the beam gap
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .mtg import DEFAULT_THRESHOLD_PS
from .rtdl import ADDR_RESET, MAX_DATA, RtdlError, RtdlFrame, decode_frame
from .ring import CARRIER_PER_TURN, carrier_period
from .simcore import PS_PER_NS, PS_PER_S, TimedEvent

TWO_PI = 2.0 * math.pi
DESIRED_ACCURACY_PS = 500_000  # +-0.5 us
REQUIRED_ACCURACY_PS = 1_000_000  # +-1 us


# -- utility module ---------------------------------------------------------------


@dataclass
class UtilityModule:
    name: str
    reset_address: int = 0
    interrupt_codes: frozenset = frozenset()
    rtdl_memory: list = field(default_factory=lambda: [0] * 256)
    reset_asserted: bool = False
    reset_at: Optional[int] = None
    interrupt_log: list = field(default_factory=list)
    rtdl_errors: int = 0

    def __post_init__(self):
        if not 0 <= self.reset_address <= MAX_DATA:
            raise ValueError("reset_address must fit in 24 bits")
        self.interrupt_codes = frozenset(int(c) for c in self.interrupt_codes)

    def on_event(self, ev: TimedEvent) -> Optional[tuple[int, int]]:
        if ev.code in self.interrupt_codes:
            rec = (ev.at, ev.code)
            self.interrupt_log.append(rec)
            return rec
        return None

    def store_frame(self, frame: RtdlFrame, at: Optional[int] = None) -> None:
        self.rtdl_memory[frame.address] = frame.data
        # address 0 never names a module, so a zero reset frame is a no-op
        if frame.address == ADDR_RESET and frame.data and frame.data == self.reset_address:
            if not self.reset_asserted:
                self.reset_at = at
            self.reset_asserted = True

    def receive_rtdl(self, raw: bytes, at: Optional[int] = None) -> bool:
        try:
            frame = decode_frame(raw)
        except RtdlError:
            self.rtdl_errors += 1
            return False
        self.store_frame(frame, at)
        return True

    def interrupt_count(self, code: int) -> int:
        return sum(1 for _, c in self.interrupt_log if c == code)


# -- neutron chopper -------------------------------------------------------------

CHOPPER_KINDS = ("fermi", "t0", "bandwidth")
DEFAULT_HARMONIC = {"fermi": 10, "t0": 1, "bandwidth": 1}
# per unit harmonic; scaled by m
DEFAULT_ALPHA_MAX = 100.0  # rad/s^2
DEFAULT_BANDWIDTH = 50.0  # rad/s, triple closed-loop pole


@dataclass
class ChopperRotor:
    """
    Rotor driven by an acceleration-limited PID on phase error.

    The speed-error term supplies the damping a pure PI on phase cannot give
    a double-integrator plant. Integration is frozen while the drive is
    saturated in the direction of the error.
    """

    name: str
    kind: str = "t0"
    harmonic: int = 1
    alpha_max: float = DEFAULT_ALPHA_MAX
    kp: float = 3 * DEFAULT_BANDWIDTH**2
    ki: float = DEFAULT_BANDWIDTH**3
    kd: float = 3 * DEFAULT_BANDWIDTH
    phase: float = 0.0
    omega: float = 0.0
    integral: float = 0.0
    last_accel: float = 0.0
    max_accel: float = 0.0
    clamp_events: int = 0

    def __post_init__(self):
        if self.kind not in CHOPPER_KINDS:
            raise ValueError(f"unknown chopper kind {self.kind!r}; expected one of {CHOPPER_KINDS}")
        if self.harmonic < 1:
            raise ValueError("harmonic must be >= 1")
        if self.alpha_max <= 0:
            raise ValueError("alpha_max must be positive")

    @classmethod
    def for_kind(cls, name: str, kind: str, harmonic: Optional[int] = None, **kw) -> "ChopperRotor":
        m = DEFAULT_HARMONIC[kind] if harmonic is None else harmonic
        kw.setdefault("alpha_max", DEFAULT_ALPHA_MAX * m)
        return cls(name=name, kind=kind, harmonic=m, **kw)

    def step(self, dt: float, ref_phase: float, ref_omega: float = 0.0) -> float:
        """Advance dt seconds toward the reference; returns the commanded acceleration."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        err = wrap(ref_phase - self.phase)
        raw = self.kp * err + self.ki * (self.integral + err * dt) + self.kd * (ref_omega - self.omega)
        accel = min(max(raw, -self.alpha_max), self.alpha_max)
        if accel != raw:
            self.clamp_events += 1
            if (raw > 0) != (err > 0):
                self.integral += err * dt
        else:
            self.integral += err * dt
        assert abs(accel) <= self.alpha_max
        self.omega += accel * dt
        self.phase += self.omega * dt
        self.last_accel = accel
        self.max_accel = max(self.max_accel, abs(accel))
        return accel

    def time_error(self, ref_phase: float, cycle_period_s: float) -> int:
        """Phase error at an instant, as a time offset in ps (positive: rotor late)."""
        err = wrap(ref_phase - self.phase)
        return round(err / (self.harmonic * TWO_PI / cycle_period_s) * PS_PER_S)


def wrap(angle: float) -> float:
    return (angle + math.pi) % TWO_PI - math.pi


def chopper_step(state: ChopperRotor, dt: float, ref_phase: float, ref_omega: float = 0.0) -> ChopperRotor:
    state.step(dt, ref_phase, ref_omega)
    return state


@dataclass(frozen=True)
class ChopperError:
    time_error_ps: int
    locked: bool
    desired_ok: bool
    required_ok: bool


def chopper_phase_error_at(
    state: ChopperRotor,
    ref_phase: float,
    cycle_period_s: float,
    locked: bool = True,
) -> ChopperError:
    err = state.time_error(ref_phase, cycle_period_s)
    return ChopperError(err, locked, abs(err) <= DESIRED_ACCURACY_PS, abs(err) <= REQUIRED_ACCURACY_PS)


class ChopperDriver:
    """
    Drives one rotor along the machine-cycle train: the reference phase
    advances 2*pi*m per cycle and passes through a whole multiple of 2*pi*m
    at every extraction instant.
    """

    def __init__(self, rotor: ChopperRotor, substeps: int = 16, lock_cycles: int = 10):
        self.rotor = rotor
        self.substeps = substeps
        self.lock_cycles = lock_cycles
        self.prev_extraction: Optional[int] = None
        self.turns = 0
        self.good_run = 0
        self.locked = False
        self.locked_at: Optional[int] = None

    def start(self, first_extraction: int, period_ps: int) -> None:
        self.prev_extraction = first_extraction - period_ps
        m = self.rotor.harmonic
        self.rotor.phase = 0.0
        self.rotor.omega = TWO_PI * m * PS_PER_S / period_ps

    def advance_to(self, extraction: int, cycle_index: int) -> ChopperError:
        r = self.rotor
        m = r.harmonic
        span_ps = extraction - self.prev_extraction
        period_s = span_ps / PS_PER_S
        dt = period_s / self.substeps
        base = TWO_PI * m * self.turns
        ref_omega = TWO_PI * m / period_s
        # the controller sees the reference at the start of each substep
        for j in range(self.substeps):
            r.step(dt, base + TWO_PI * m * j / self.substeps, ref_omega)
        self.turns += 1
        self.prev_extraction = extraction
        res = chopper_phase_error_at(r, TWO_PI * m * self.turns, period_s, self.locked)
        if not self.locked:
            self.good_run = self.good_run + 1 if res.required_ok else 0
            if self.good_run >= self.lock_cycles:
                self.locked = True
                self.locked_at = cycle_index
        return res


# -- klystron window ---------------------------------------------------------------


@dataclass(frozen=True)
class KlystronResult:
    cycle_index: int
    passed: bool
    margin: int


@dataclass
class KlystronWindow:
    window: int = DEFAULT_THRESHOLD_PS
    results: list = field(default_factory=list)

    def check(self, cycle_index: int, deviation: int) -> KlystronResult:
        res = KlystronResult(cycle_index, abs(deviation) <= self.window, self.window - abs(deviation))
        self.results.append(res)
        return res

    def failed_cycles(self) -> list[int]:
        return [r.cycle_index for r in self.results if not r.passed]


# -- beam gate -------------------------------------------------------------------


@dataclass(frozen=True)
class BeamGateProgram:
    """
    Per-turn gate: off for ``gap_ticks`` carrier ticks, on for the rest of the
    16-tick turn. The program origin sits half a gap ahead of the injection
    turn boundary, so each gap is centred on a ring turn boundary and an
    extraction kicker firing on a turn boundary lands mid-gap.
    """

    gap_ticks: int = 5
    fill_turns: int = 1060

    def __post_init__(self):
        if not 0 < self.gap_ticks < CARRIER_PER_TURN:
            raise ValueError("gap_ticks must lie in 1..15")

    @classmethod
    def for_period(cls, ring_period: int, gap_ns: float = 300.0, fill_turns: int = 1060) -> "BeamGateProgram":
        ticks = round(Fraction(round(gap_ns * PS_PER_NS)) / carrier_period(ring_period))
        return cls(max(1, ticks), fill_turns)

    def origin(self, injection_at, ring_period: int) -> Fraction:
        return Fraction(injection_at) - Fraction(self.gap_ticks, 2) * carrier_period(ring_period)

    def gap_center(self, origin: Fraction, ring_period: int, turn: int) -> Fraction:
        return origin + (CARRIER_PER_TURN * turn + Fraction(self.gap_ticks, 2)) * carrier_period(ring_period)

    def alignment(self, t: int, origin: Fraction, ring_period: int) -> Fraction:
        """Signed offset of instant t from the nearest gap centre (the gap keeps circulating after fill)."""
        tick = carrier_period(ring_period)
        first = origin + Fraction(self.gap_ticks, 2) * tick
        turn = round((t - first) / (CARRIER_PER_TURN * tick))
        return t - self.gap_center(origin, ring_period, max(turn, 0))


def beam_gate_edges(program: BeamGateProgram, turns: Optional[int] = None) -> list[tuple[int, str]]:
    """(tick, 'off'|'on') edges relative to the program origin for turns 0..fill-1."""
    n = program.fill_turns if turns is None else turns
    out = []
    for k in range(n):
        out.append((CARRIER_PER_TURN * k, "off"))
        out.append((CARRIER_PER_TURN * k + program.gap_ticks, "on"))
    return out


def edge_instants(program: BeamGateProgram, origin: Fraction, ring_period: int) -> list[Fraction]:
    tick = carrier_period(ring_period)
    return [origin + t * tick for t, _ in beam_gate_edges(program)]
