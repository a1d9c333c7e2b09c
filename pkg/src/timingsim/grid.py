"""
AC line model: 60 Hz zero crossings with mean-reverting frequency wander.

Per cycle the instantaneous frequency follows

    f[k+1] = clamp(f[k] + reversion * (f_nominal - f[k]) + N(0, wander_sigma))

and the next positive-going zero crossing lands round(1e12 / f[k+1]) ps
after the previous one. The default noise figures are modelling
assumptions, not measured grid data.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simcore import PS_PER_S

FREQUENCY_STEP = "frequency-step"
PHASE_STEP = "phase-step"
TRANSIENT_KINDS = (FREQUENCY_STEP, PHASE_STEP)


class GridConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Transient:
    at: int  # ps
    kind: str
    magnitude: float  # Hz for frequency-step, ps for phase-step

    def __post_init__(self):
        if self.kind not in TRANSIENT_KINDS:
            raise GridConfigError(f"unknown transient kind {self.kind!r}; expected one of {TRANSIENT_KINDS}")


@dataclass
class GridParams:
    f_nominal: float = 60.0
    wander_sigma: float = 0.003
    wander_reversion: float = 0.01
    f_bounds: tuple[float, float] = (59.9, 60.1)
    transients: list[Transient] = field(default_factory=list)
    seed: int = 0
    start_ps: int = 0

    def validate(self) -> None:
        lo, hi = self.f_bounds
        if not (0 < lo <= self.f_nominal <= hi):
            raise GridConfigError(f"f_bounds {self.f_bounds} must bracket f_nominal={self.f_nominal}")
        if self.wander_sigma < 0:
            raise GridConfigError("wander_sigma must be >= 0")
        if not (0 <= self.wander_reversion <= 1):
            raise GridConfigError("wander_reversion must lie in [0, 1]")

    def spacing_bounds(self) -> tuple[int, int]:
        lo, hi = self.f_bounds
        return period_ps(hi), period_ps(lo)


@dataclass(frozen=True)
class ZeroCrossing:
    at: int
    cycle_index: int


def period_ps(freq_hz: float) -> int:
    return round(PS_PER_S / freq_hz)


class Grid:
    """Stateful zero-crossing generator; one instance per simulation."""

    _BLOCK = 4096

    def __init__(self, params: GridParams):
        params.validate()
        self.params = params
        self.freq = params.f_nominal
        self.t = params.start_ps
        self.cycle_index = -1
        self.last_spacing = period_ps(params.f_nominal)
        self._phase_shift = 0
        self._pending = sorted(params.transients, key=lambda tr: tr.at)
        self._rng = np.random.default_rng(params.seed)
        self._noise = np.empty(0)
        self._noise_pos = 0

    def _normal(self) -> float:
        if self._noise_pos >= len(self._noise):
            self._noise = self._rng.standard_normal(self._BLOCK)
            self._noise_pos = 0
        z = self._noise[self._noise_pos]
        self._noise_pos += 1
        return float(z)

    def apply_transient(self, kind: str, magnitude: float) -> None:
        if kind == FREQUENCY_STEP:
            self.freq += magnitude
        elif kind == PHASE_STEP:
            self._phase_shift += int(magnitude)
        else:
            raise GridConfigError(f"unknown transient kind {kind!r}")

    def next_zero_crossing(self) -> ZeroCrossing:
        # scheduled transients take effect once the line has passed their time
        while self._pending and self._pending[0].at <= self.t:
            tr = self._pending.pop(0)
            self.apply_transient(tr.kind, tr.magnitude)
        p = self.params
        f = self.freq + p.wander_reversion * (p.f_nominal - self.freq) + p.wander_sigma * self._normal()
        self.freq = min(max(f, p.f_bounds[0]), p.f_bounds[1])
        spacing = period_ps(self.freq) + self._phase_shift
        self._phase_shift = 0
        self.t += spacing
        self.last_spacing = spacing
        self.cycle_index += 1
        return ZeroCrossing(self.t, self.cycle_index)

    def crossings(self, n: int) -> np.ndarray:
        return np.fromiter((self.next_zero_crossing().at for _ in range(n)), dtype=np.int64, count=n)
