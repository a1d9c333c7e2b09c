"""
Master timing generator.

A second-order software PLL tracks grid zero crossings and emits one smoothed
reference instant per grid cycle. Each machine cycle is then laid out
backwards from extraction in whole ring turns, so every beam-synchronous
instant is an exact integer multiple of the latched ring period away from
Cycle Start.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from typing import Iterable, Optional, Sequence

import numpy as np

from .codes import EventCode
from .grid import Grid, GridParams, ZeroCrossing, period_ps
from .ring import CARRIER_PER_TURN, carrier_period
from .simcore import PS_PER_US, TimedEvent

DIAG_PRETRIG_TURNS = 5500
DEFAULT_N_CS = 6000
DEFAULT_FILL_TURNS = 1060
DEFAULT_THRESHOLD_PS = 500 * PS_PER_US
KLYSTRON_LEAD_PS = 400 * PS_PER_US
CALIBRATION_SEED = 20_240_601
CALIBRATION_TOLERANCE = 0.20
# integer-ps time cannot express a non-zero spread below this
SIGMA_FLOOR_PS = 1.0
# event-link frame length in carrier ticks (start + 8 data + parity + stop)
LINK_FRAME_TICKS = 11


class MtgConfigError(ValueError):
    pass


class CalibrationError(RuntimeError):
    pass


class RingPhaseError(RuntimeError):
    pass


# -- PLL ---------------------------------------------------------------------


@dataclass(frozen=True)
class PllState:
    phase_estimate: int
    period_estimate: int
    coupling: float
    coupling_freq: float
    period_bounds: tuple[int, int]
    lock_window: int = DEFAULT_THRESHOLD_PS
    locked: bool = False


def default_coupling_freq(coupling: float) -> float:
    # double closed-loop pole at 1 - coupling/2: critical damping
    return coupling * coupling / 4.0


def pll_init(grid: GridParams, coupling: float, coupling_freq: Optional[float] = None) -> PllState:
    if not (0.0 < coupling <= 1.0):
        raise MtgConfigError(f"coupling must lie in (0, 1], got {coupling}")
    if coupling_freq is None:
        coupling_freq = default_coupling_freq(coupling)
    if not (0.0 <= coupling_freq <= 1.0):
        raise MtgConfigError(f"coupling_freq must lie in [0, 1], got {coupling_freq}")
    period = period_ps(grid.f_nominal)
    return PllState(
        phase_estimate=grid.start_ps + period,
        period_estimate=period,
        coupling=coupling,
        coupling_freq=coupling_freq,
        period_bounds=grid.spacing_bounds(),
    )


def pll_update(state: PllState, zc: ZeroCrossing) -> tuple[PllState, int]:
    """Feed one zero crossing; return the new state and the smoothed reference instant."""
    err = zc.at - state.phase_estimate
    correction = round(state.coupling * err)
    reference = state.phase_estimate + correction
    lo, hi = state.period_bounds
    period = min(max(state.period_estimate + round(state.coupling_freq * err), lo), hi)
    new = replace(
        state,
        phase_estimate=state.phase_estimate + state.period_estimate + correction,
        period_estimate=period,
        locked=abs(err) <= state.lock_window,
    )
    return new, reference


def pll_deviations(crossings: Sequence[int], state: PllState) -> np.ndarray:
    """Run the loop over a crossing sequence and return reference - crossing per cycle."""
    # same arithmetic as pll_update, unrolled for calibration speed
    phase, period = state.phase_estimate, state.period_estimate
    k, kf = state.coupling, state.coupling_freq
    lo, hi = state.period_bounds
    out = np.empty(len(crossings), dtype=np.int64)
    for i, t in enumerate(crossings):
        t = int(t)
        err = t - phase
        corr = round(k * err)
        out[i] = phase + corr - t
        phase += period + corr
        period = min(max(period + round(kf * err), lo), hi)
    return out


def calibrate_coupling(
    grid: GridParams,
    target_sigma: float,
    *,
    cycles: int = 10_000,
    seed: int = CALIBRATION_SEED,
    kappa_min: float = 1e-3,
    max_iter: int = 60,
) -> float:
    """
    Find the proportional coupling whose closed loop yields the requested
    standard deviation of (reference - zero crossing), in ps.

    Deterministic log-bisection over (kappa_min, 1] on a fixed-seed grid
    realization; the frequency gain follows the critical-damping rule.
    """
    if target_sigma < 0:
        raise CalibrationError("target sigma must be >= 0")
    if target_sigma == 0:
        return 1.0
    if target_sigma < SIGMA_FLOOR_PS:
        raise CalibrationError(
            f"target sigma {target_sigma} ps is below the {SIGMA_FLOOR_PS:g} ps time-quantization floor"
        )
    crossings = Grid(replace(grid, seed=seed)).crossings(cycles)

    def sigma(k: float) -> float:
        return float(np.std(pll_deviations(crossings, pll_init(grid, k))))

    lo, hi = kappa_min, 1.0
    s_lo = sigma(lo)
    if s_lo < target_sigma:
        raise CalibrationError(
            f"target sigma {target_sigma:.0f} ps unreachable: achievable range is [0, {s_lo:.0f}] ps "
            f"for coupling in [{kappa_min:g}, 1]"
        )
    best_k, best_s = lo, s_lo
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi)
        s = sigma(mid)
        if abs(s - target_sigma) < abs(best_s - target_sigma):
            best_k, best_s = mid, s
        if abs(s - target_sigma) <= 0.005 * target_sigma:
            break
        if s > target_sigma:
            lo = mid
        else:
            hi = mid
    if abs(best_s - target_sigma) > CALIBRATION_TOLERANCE * target_sigma:
        raise CalibrationError(
            f"calibration did not converge: best coupling {best_k:.6g} gives sigma {best_s:.0f} ps "
            f"vs target {target_sigma:.0f} ps"
        )
    return best_k


# -- cycle scheduling -----------------------------------------------------------


@dataclass(frozen=True)
class MtgParams:
    n_cs: int = DEFAULT_N_CS
    fill_turns: int = DEFAULT_FILL_TURNS
    threshold_ps: int = DEFAULT_THRESHOLD_PS
    target_sigma_ps: Optional[int] = None
    coupling: Optional[float] = None
    coupling_freq: Optional[float] = None
    # None: Cycle Start lands on the smoothed reference
    extraction_offset_ps: Optional[int] = None
    klystron_lead_ps: int = KLYSTRON_LEAD_PS
    diag_pretrig_turns: int = DIAG_PRETRIG_TURNS
    calibration_seed: int = CALIBRATION_SEED
    calibration_cycles: int = 10_000

    def validate(self) -> None:
        if self.n_cs <= self.diag_pretrig_turns or self.n_cs <= self.fill_turns:
            raise MtgConfigError(
                f"n_cs={self.n_cs} must exceed both diag_pretrig_turns={self.diag_pretrig_turns} "
                f"and fill_turns={self.fill_turns}; otherwise those instants precede Cycle Start"
            )
        if self.fill_turns <= 0:
            raise MtgConfigError("fill_turns must be positive")
        if self.threshold_ps < 0:
            raise MtgConfigError("threshold_ps must be >= 0")
        if self.coupling is not None and self.target_sigma_ps is not None:
            raise MtgConfigError("give either coupling or target_sigma_ps, not both")


@dataclass(frozen=True)
class CycleSchedule:
    cycle_index: int
    t_extraction: int
    n_cs: int
    t_cycle_start: int
    t_rtdl_start: int
    t_injection: int
    t_klystron: int
    t_diag_pretrig: int
    fill_turns: int
    ring_period: int
    reference: int

    @property
    def carrier(self) -> Fraction:
        return carrier_period(self.ring_period)

    def tick_of(self, t: int) -> int:
        """Carrier tick (relative to Cycle Start) containing instant t."""
        return math.floor((t - self.t_cycle_start) / self.carrier)

    def tick_instant(self, tick: int) -> int:
        """First integer ps at or after the given carrier tick boundary."""
        return self.t_cycle_start + math.ceil(tick * self.carrier)


def schedule_cycle(
    cycle_index: int,
    reference: int,
    ring_period: int,
    params: MtgParams,
    rtdl_lead_ps: int,
) -> CycleSchedule:
    params.validate()
    if ring_period <= 0:
        raise MtgConfigError("ring_period must be positive")
    cs_span = params.n_cs * ring_period
    offset = cs_span if params.extraction_offset_ps is None else params.extraction_offset_ps
    t_ext = reference + offset
    t_cs = t_ext - cs_span
    t_inj = t_ext - params.fill_turns * ring_period
    if rtdl_lead_ps <= 0:
        raise MtgConfigError("RTDL lead must be positive so RTDLStart precedes Cycle Start")
    return CycleSchedule(
        cycle_index=cycle_index,
        t_extraction=t_ext,
        n_cs=params.n_cs,
        t_cycle_start=t_cs,
        t_rtdl_start=t_cs - rtdl_lead_ps,
        t_injection=t_inj,
        t_klystron=t_inj - params.klystron_lead_ps,
        t_diag_pretrig=t_ext - params.diag_pretrig_turns * ring_period,
        fill_turns=params.fill_turns,
        ring_period=ring_period,
        reference=reference,
    )


def sync_lost_instant(sched: CycleSchedule) -> int:
    # one frame after RTDLStart on the event link, ahead of Cycle Start
    return sched.tick_instant(sched.tick_of(sched.t_rtdl_start) + LINK_FRAME_TICKS)


def end_cycle_instant(sched: CycleSchedule) -> int:
    return sched.t_extraction + sched.ring_period


def cycle_events(sched: CycleSchedule, sync: "SyncStatus", source: str = "mtg") -> list[TimedEvent]:
    """The cycle's event-link traffic, in time order."""
    idx = sched.cycle_index
    evs = [TimedEvent(sched.t_rtdl_start, EventCode.RTDL_START, idx, source)]
    if not sync.in_sync:
        evs.append(TimedEvent(sync_lost_instant(sched), EventCode.SYNC_LOST, idx, source))
    evs += [
        TimedEvent(sched.t_cycle_start, EventCode.CYCLE_START, idx, source),
        TimedEvent(sched.t_diag_pretrig, EventCode.DIAG_PRETRIG, idx, source),
        TimedEvent(sched.t_klystron, EventCode.KLYSTRON_GATE, idx, source),
        TimedEvent(sched.t_injection, EventCode.INJECTION_START, idx, source),
        TimedEvent(sched.t_extraction, EventCode.EXTRACTION, idx, source),
        TimedEvent(end_cycle_instant(sched), EventCode.END_CYCLE, idx, source),
    ]
    return sorted(evs, key=lambda e: e.at)


# -- ring rf phase latch ---------------------------------------------------------


@dataclass(frozen=True)
class PhaseOrigin:
    at: int
    ring_period: int
    cycle_index: int

    @property
    def carrier(self) -> Fraction:
        return carrier_period(self.ring_period)

    def turn_instant(self, turn: int) -> int:
        return self.at + turn * self.ring_period

    def tick_instant(self, tick: int) -> Fraction:
        return self.at + tick * self.carrier

    def turns_to_ticks(self, turns: int) -> int:
        return turns * CARRIER_PER_TURN


class RingRf:
    """
    Ring-rf phase latch. Cycle Start zeroes the phase and freezes the period;
    the latch only reopens once the beam has been extracted.
    """

    def __init__(self):
        self.origin: Optional[PhaseOrigin] = None
        self.cycle_open = False
        self.filling = False

    def reset(self, at: int, ring_period: int, cycle_index: int = 0) -> PhaseOrigin:
        if self.cycle_open:
            state = "between injection and extraction" if self.filling else "before extraction"
            raise RingPhaseError(f"ring-rf phase reset rejected at {at} ps: cycle in progress ({state})")
        self.origin = PhaseOrigin(at, ring_period, cycle_index)
        self.cycle_open = True
        return self.origin

    def begin_injection(self, at: int) -> None:
        if not self.cycle_open:
            raise RingPhaseError("injection before ring-rf phase reset")
        self.filling = True

    def extract(self, at: int) -> None:
        if not self.cycle_open:
            raise RingPhaseError("extraction without an open cycle")
        self.cycle_open = False
        self.filling = False


# -- sync monitoring -----------------------------------------------------------


@dataclass(frozen=True)
class SyncStatus:
    deviation: int
    threshold: int
    in_sync: bool
    consecutive_lost: int
    cycle_index: int = 0


def nearest_crossing(t: int, crossings: Iterable[int]) -> int:
    return min(crossings, key=lambda c: (abs(t - c), c))


def check_sync(
    sched: CycleSchedule,
    crossings: Iterable[int],
    threshold: int = DEFAULT_THRESHOLD_PS,
    previous: Optional[SyncStatus] = None,
    max_spacing: Optional[int] = None,
) -> SyncStatus:
    crossings = list(crossings)
    if not crossings:
        raise ValueError("check_sync needs at least one zero crossing")
    near = nearest_crossing(sched.t_cycle_start, crossings)
    deviation = sched.t_cycle_start - near
    if max_spacing is not None and abs(deviation) > max_spacing:
        raise ValueError(f"no zero crossing within one grid period of Cycle Start ({deviation} ps away)")
    in_sync = abs(deviation) <= threshold
    lost = 0 if in_sync else (previous.consecutive_lost if previous else 0) + 1
    return SyncStatus(deviation, threshold, in_sync, lost, sched.cycle_index)
