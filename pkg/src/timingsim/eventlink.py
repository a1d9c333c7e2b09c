"""
Event link: 8-bit event codes on a biphase-mark line.

Line code
    Every bit cell starts with a level transition. A logical 1 adds a second
    transition at mid-cell; a logical 0 does not. The line idles at logical 0
    and its level before the first cell is taken as 0. One cell lasts one
    carrier tick (ring period / 16).

Frame (11 cells)
    start bit (1), eight data bits MSB first, odd parity over the data bits
    (data + parity carries an odd number of ones), stop bit (0). An event's
    instant is the tick of its start cell.

File format (``.evlk``)
    ``b"EVLK1"`` then little-endian uint64 cell-duration numerator (ps),
    uint64 denominator, uint64 half-cell count, then the half-cell levels
    packed eight per byte, first half-cell in bit 0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from typing import BinaryIO, Iterable, Optional, Sequence

import numpy as np

from .codes import LINK_CODES, EventCode, code_name
from .ring import carrier_period

FRAME_CELLS = 11
MIN_SLOPE_CELLS = 8
MAGIC = b"EVLK1"
_HEADER = struct.Struct("<QQQ")


class EncodeError(ValueError):
    pass


class DelayArmError(RuntimeError):
    pass


def parity_bit(code: int) -> int:
    """Odd parity: the returned bit makes data + parity hold an odd number of ones."""
    return 0 if bin(code).count("1") % 2 else 1


def frame_bits(code: int) -> list[int]:
    data = [(code >> (7 - i)) & 1 for i in range(8)]
    return [1] + data + [parity_bit(code), 0]


@dataclass
class Bitstream:
    levels: np.ndarray  # one uint8 level per half cell
    cell_ps: Optional[Fraction] = None

    @property
    def n_cells(self) -> int:
        return len(self.levels) // 2

    def __eq__(self, other):
        if not isinstance(other, Bitstream):
            return NotImplemented
        return self.cell_ps == other.cell_ps and np.array_equal(self.levels, other.levels)

    def to_bytes(self) -> bytes:
        cell = self.cell_ps if self.cell_ps is not None else Fraction(0)
        head = MAGIC + _HEADER.pack(cell.numerator, cell.denominator, len(self.levels))
        return head + np.packbits(self.levels, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if data[:5] != MAGIC:
            raise ValueError("not an event-link bitstream (bad magic)")
        num, den, n = _HEADER.unpack_from(data, 5)
        payload = np.frombuffer(data, dtype=np.uint8, offset=5 + _HEADER.size)
        if len(payload) * 8 < n:
            raise ValueError(f"bitstream truncated: header promises {n} half cells")
        levels = np.unpackbits(payload, bitorder="little")[:n].copy()
        cell = Fraction(num, den) if num else None
        return cls(levels, cell)

    def write(self, fh: BinaryIO) -> None:
        fh.write(self.to_bytes())

    @classmethod
    def read(cls, fh: BinaryIO) -> "Bitstream":
        return cls.from_bytes(fh.read())


def encode(
    events: Sequence[tuple[int, int]],
    n_cells: Optional[int] = None,
    cell_ps: Optional[Fraction] = None,
) -> Bitstream:
    """Place one frame per (tick, code) and return the biphase-mark line."""
    prev = None
    for tick, code in events:
        if code not in LINK_CODES:
            raise EncodeError(f"code 0x{code:02X} ({code_name(code)}) is not a transmittable event code")
        if tick < 0:
            raise EncodeError(f"negative tick {tick} for {code_name(code)}")
        if prev is not None:
            if tick < prev[0]:
                raise EncodeError("events must be sorted by tick")
            if tick - prev[0] < FRAME_CELLS:
                raise EncodeError(
                    f"frames overlap: {code_name(prev[1])} at tick {prev[0]} and "
                    f"{code_name(code)} at tick {tick} (need >= {FRAME_CELLS} ticks apart)"
                )
        prev = (tick, code)
    needed = (prev[0] + FRAME_CELLS + 1) if prev else 0
    if n_cells is None:
        n_cells = needed
    elif n_cells < needed:
        raise EncodeError(f"stream of {n_cells} cells too short for last frame (needs {needed})")
    bits = np.zeros(n_cells, dtype=np.uint8)
    for tick, code in events:
        bits[tick : tick + FRAME_CELLS] = frame_bits(code)
    toggles = np.empty(2 * n_cells, dtype=np.uint8)
    toggles[0::2] = 1
    toggles[1::2] = bits
    return Bitstream(np.bitwise_xor.accumulate(toggles), cell_ps)


def oversample(levels: np.ndarray, samples_per_cell: float, offset: float = 0.0) -> np.ndarray:
    """Resample a half-cell line at an arbitrary constant rate (for clock-recovery tests)."""
    n_cells = len(levels) / 2
    n = int(math.floor((n_cells - offset) * samples_per_cell))
    t = offset + (np.arange(n) + 0.5) / samples_per_cell
    return levels[np.minimum((t * 2).astype(np.int64), len(levels) - 1)]


@dataclass
class ClockReport:
    valid: bool
    cell_samples: float = 0.0
    phase: float = 0.0
    cells: int = 0
    boundary_transitions: int = 0
    residual_rms: float = 0.0
    cell_ps: Optional[float] = None


@dataclass(frozen=True)
class LinkError:
    tick: int
    kind: str  # parity | framing | code-violation | unregistered
    detail: str


@dataclass
class DecodeResult:
    events: list[tuple[int, int]]
    errors: list[LinkError] = field(default_factory=list)
    clock: ClockReport = field(default_factory=lambda: ClockReport(False))


def _fit_line(pos: np.ndarray, n: np.ndarray) -> tuple[float, float]:
    if len(pos) == 1 or np.ptp(n) == 0:
        return float(pos[0] - n[0]), 0.0
    slope, icpt = np.polyfit(n.astype(float), pos.astype(float), 1)
    return float(icpt), float(slope)


def recover_clock(x: np.ndarray) -> ClockReport:
    """Estimate cell length and boundary phase (in samples) from the transition pattern alone."""
    n = len(x)
    trans = np.flatnonzero(x[1:] != x[:-1]) + 1
    if len(trans) < 2:
        return ClockReport(False)
    edges = np.concatenate(([0], trans, [n]))
    runs = np.diff(edges)
    body = runs[1:-1] if len(runs) > 3 else runs
    rough = float(np.percentile(body, 90))
    # every interior run is a half or a full cell; their lengths telescope to
    # the span between transitions, so quantisation costs one sample overall
    n_long = int(np.count_nonzero(body >= 0.75 * rough))
    cell = float(body.sum() / (n_long + 0.5 * (len(body) - n_long)))
    if cell < 2:
        return ClockReport(False)
    # both ends of a full-cell run sit on cell boundaries; mid-cell
    # transitions never bound one in a valid stream
    long_idx = np.flatnonzero((runs >= 0.75 * cell) & (runs <= 1.25 * cell))
    if len(long_idx) == 0:
        return ClockReport(False)
    anchors = edges[long_idx]
    bounds = np.unique(np.concatenate((edges[long_idx], edges[long_idx + 1])))
    bounds = bounds[(bounds > 0) & (bounds < n)]
    if len(bounds) == 0:
        bounds = anchors
    head = anchors[:64]
    rel = ((head - head[0]) / cell) % 1.0
    votes = np.minimum(rel, 1.0 - rel) < 0.25
    base = head[0] if votes.mean() >= 0.5 else head[np.argmax(~votes)]
    phase = float(base)
    # widen the fit window geometrically so rounding never skips a cell
    span = 4.0
    for _ in range(64):
        hi = phase + span * cell
        sel = bounds[(bounds >= phase - cell) & (bounds <= hi)]
        k = np.rint((sel - phase) / cell)
        # only boundaries are fitted, so the gate can absorb sample quantisation
        ok = np.abs(sel - phase - k * cell) < 0.45 * cell
        if ok.any() and np.ptp(k[ok]) >= MIN_SLOPE_CELLS:
            phase, cell = _fit_line(sel[ok], k[ok].astype(np.int64))
        elif ok.any():
            # too short a baseline to beat the run-length estimate of the slope
            phase += float(np.mean(sel[ok] - phase - k[ok] * cell))
        if hi >= n:
            break
        span *= 1.5
    k = np.rint((trans - phase) / cell)
    resid = trans - phase - k * cell
    ok = np.abs(resid) < 0.25 * cell
    phase = phase - math.floor(phase / cell + 0.5) * cell
    cells = int(math.floor((n - phase - 0.75 * cell) / cell)) + 1
    return ClockReport(
        valid=True,
        cell_samples=cell,
        phase=phase,
        cells=max(cells, 0),
        boundary_transitions=int(ok.sum()),
        residual_rms=float(np.sqrt(np.mean(resid[ok] ** 2))) if ok.any() else 0.0,
    )


def _sample_cells(x: np.ndarray, clk: ClockReport) -> tuple[np.ndarray, np.ndarray]:
    n = np.arange(clk.cells)
    b = clk.phase + n * clk.cell_samples
    last = len(x) - 1
    first = x[np.clip(np.floor(b + 0.25 * clk.cell_samples).astype(np.int64), 0, last)]
    second = x[np.clip(np.floor(b + 0.75 * clk.cell_samples).astype(np.int64), 0, last)]
    bits = (first != second).astype(np.uint8)
    viol = np.zeros(clk.cells, dtype=bool)
    if clk.cells > 1:
        before = x[np.clip(np.floor(b[1:] - 0.25 * clk.cell_samples).astype(np.int64), 0, last)]
        viol[1:] = before == first[1:]
    return bits, viol


def _hunt_frames(bits: np.ndarray, viol: np.ndarray) -> tuple[list[tuple[int, int]], list[LinkError]]:
    events: list[tuple[int, int]] = []
    errors: list[LinkError] = []
    ncells = len(bits)
    marks = np.flatnonzero(bits.astype(bool) | viol)
    explained: set[int] = set()
    pos = 0
    j = 0
    while True:
        while j < len(marks) and marks[j] < pos:
            j += 1
        if j >= len(marks):
            break
        c = int(marks[j])
        if viol[c] and c not in explained:
            # a start bit at c-1 or c was destroyed; its frame ends by c+9
            errors.append(LinkError(c, "code-violation", "missing boundary transition outside a frame"))
            pos = c + FRAME_CELLS - 1
            continue
        if not bits[c]:
            pos = c + 1
            continue
        if c + FRAME_CELLS > ncells:
            errors.append(LinkError(c, "framing", "frame truncated by end of stream"))
            break
        fr = bits[c : c + FRAME_CELLS]
        inner = np.flatnonzero(viol[c + 1 : c + FRAME_CELLS])
        code = int(np.packbits(fr[1:9])[0])
        if fr[10] != 0:
            errors.append(LinkError(c, "framing", "stop bit is 1"))
            # a flipped second half of the stop cell also erases the next boundary
            if c + FRAME_CELLS < ncells and viol[c + FRAME_CELLS]:
                explained.add(c + FRAME_CELLS)
        elif fr[9] != parity_bit(code):
            # a corrupted data half-cell also drops a boundary; parity names the cause
            extra = f", missing boundary at cell {c + 1 + inner[0]}" if len(inner) else ""
            errors.append(LinkError(c, "parity", f"parity mismatch for data 0x{code:02X}{extra}"))
        elif len(inner):
            errors.append(LinkError(c, "code-violation", f"missing boundary transition at cell {c + 1 + inner[0]}"))
        elif code not in LINK_CODES:
            errors.append(LinkError(c, "unregistered", f"code 0x{code:02X} is not registered"))
        else:
            events.append((c, code))
        pos = c + FRAME_CELLS
    return events, errors


def decode(stream, sample_ps: Optional[Fraction] = None) -> DecodeResult:
    """
    Recover events from a line using transitions only.

    ``stream`` is a :class:`Bitstream` or any array of sampled line levels;
    the sampling rate need not be known. ``sample_ps`` (defaulting to half the
    bitstream cell duration) only converts the recovered cell length to ps.
    """
    if isinstance(stream, Bitstream):
        x = stream.levels
        if sample_ps is None and stream.cell_ps is not None:
            sample_ps = stream.cell_ps / 2
    else:
        x = np.asarray(stream, dtype=np.uint8)
    clk = recover_clock(x)
    if not clk.valid:
        # a frame brings at least one boundary transition per cell
        if np.count_nonzero(x[1:] != x[:-1]) >= FRAME_CELLS:
            return DecodeResult([], [LinkError(0, "framing", "no recoverable clock")], clk)
        return DecodeResult([], [], clk)
    if sample_ps is not None:
        clk.cell_ps = float(clk.cell_samples * sample_ps)
    bits, viol = _sample_cells(x, clk)
    events, errors = _hunt_frames(bits, viol)
    return DecodeResult(events, errors, clk)


# -- beam-synchronous delays ----------------------------------------------------


@dataclass(frozen=True)
class DelayCounter:
    arm_event: int
    delay_ticks: int

    def __post_init__(self):
        if self.delay_ticks < 0:
            raise ValueError("delay_ticks must be >= 0")


def arm_delay(counter: DelayCounter, origin, arm_at: int) -> Fraction:
    """
    Fire instant of a tick-counted delay armed at ``arm_at``.

    ``origin`` is the cycle's ring-rf phase origin (carries the latched
    period); the result is exact: arm_at + delay_ticks * ring_period / 16.
    """
    if origin is None:
        raise DelayArmError("delay counter armed before ring-rf phase reset in this cycle")
    if arm_at < origin.at:
        raise DelayArmError(f"arm instant {arm_at} precedes the cycle phase origin {origin.at}")
    return arm_at + counter.delay_ticks * carrier_period(origin.ring_period)


def link_window(traffic: Iterable[tuple[int, int]]) -> tuple[int, list[tuple[int, int]]]:
    """Shift absolute ticks so the earliest frame starts at cell 0."""
    traffic = sorted(traffic)
    if not traffic:
        return 0, []
    base = traffic[0][0]
    return base, [(t - base, c) for t, c in traffic]


__all__ = [
    "Bitstream", "ClockReport", "DecodeResult", "DelayArmError", "DelayCounter", "EncodeError",
    "EventCode", "FRAME_CELLS", "LinkError", "arm_delay", "decode", "encode", "frame_bits",
    "link_window", "oversample", "parity_bit", "recover_clock",
]
