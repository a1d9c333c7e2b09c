"""Ring kinematics and beam-structure geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

from .simcore import PS_PER_NS, PS_PER_S

SPEED_OF_LIGHT = 299_792_458.0  # m/s
PROTON_MASS_MEV = 938.272
CARRIER_PER_TURN = 16
ENERGY_RANGE_MEV = (950.0, 1300.0)


class RingRangeError(ValueError):
    pass


@dataclass(frozen=True)
class RingParams:
    circumference: float = 248.0  # m
    kinetic_energy: float = 1000.0  # MeV
    proton_rest_mass: float = PROTON_MASS_MEV

    def validate(self) -> None:
        lo, hi = ENERGY_RANGE_MEV
        if not (lo <= self.kinetic_energy <= hi):
            raise RingRangeError(
                f"kinetic energy {self.kinetic_energy} MeV outside supported range [{lo:g}, {hi:g}] MeV"
            )
        if self.circumference <= 0:
            raise RingRangeError("circumference must be positive")


@dataclass(frozen=True)
class BeamStructure:
    gap_ns: float = 300.0
    minipulse_ns: float = 645.0
    fill_turns: int = 1060
    gap_tolerance_ps: int = 5_000

    @property
    def design_period_ps(self) -> int:
        return round((self.gap_ns + self.minipulse_ns) * PS_PER_NS)

    @property
    def beam_fraction(self) -> float:
        return self.minipulse_ns / (self.gap_ns + self.minipulse_ns)


def revolution_period(params: RingParams) -> int:
    """Revolution period in ps for a proton of the given kinetic energy."""
    params.validate()
    gamma = 1.0 + params.kinetic_energy / params.proton_rest_mass
    beta = math.sqrt(1.0 - 1.0 / (gamma * gamma))
    return round(PS_PER_S * params.circumference / (beta * SPEED_OF_LIGHT))


def carrier_period(ring_period: int) -> Fraction:
    """One event-link carrier tick: exactly ring_period / 16 ps."""
    if ring_period <= 0:
        raise ValueError("ring_period must be positive")
    return Fraction(ring_period, CARRIER_PER_TURN)


def ticks_to_ps(ticks: int, ring_period: int) -> Fraction:
    return ticks * carrier_period(ring_period)


def cumulative_drift(n_turns: int, period_error: int) -> int:
    """Error accumulated by a fixed-time delay after n_turns of a mis-estimated period."""
    if n_turns < 0:
        raise ValueError("n_turns must be >= 0")
    return n_turns * period_error


def gap_ticks(ring_period: int, gap_ns: float = 300.0) -> int:
    return round(Fraction(round(gap_ns * PS_PER_NS)) / carrier_period(ring_period))
