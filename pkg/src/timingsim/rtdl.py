"""
Real-time data link: addressed 24-bit frames broadcast ahead of each cycle.

Wire format, 6 bytes per frame::

    0x7E | address | data[23:16] | data[15:8] | data[7:0] | checksum

checksum = address ^ data_hi ^ data_mid ^ data_lo. A frame file is a plain
concatenation of such frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .codes import EventCode
from .simcore import PS_PER_S, TimedEvent

SYNC = 0x7E
FRAME_BYTES = 6
FRAME_BITS = 8 * FRAME_BYTES
MAX_DATA = (1 << 24) - 1
DEFAULT_BITRATE = 10_000_000

ADDR_TOD_HI = 0x01
ADDR_RING_PERIOD = 0x02
ADDR_OPERATING_MODE = 0x03
ADDR_PHASE_DIFF = 0x04
ADDR_LEBT_CHOPPER = 0x05
ADDR_PREVIOUS_PULSE = 0x06
ADDR_DAQ_MODE = 0x07
ADDR_PROFILE_ID = 0x08
ADDR_RF_GATES = 0x09
ADDR_TOD_LO = 0x0A
ADDR_RESET = 0x0B

# frames 0x03 and 0x05-0x09 carry opaque scenario-defined values
DEFAULT_REGISTRY: dict[int, str] = {
    ADDR_TOD_HI: "time of day, seconds [31:24]",
    ADDR_RING_PERIOD: "ring revolution period, ps",
    ADDR_OPERATING_MODE: "operating mode (opaque)",
    ADDR_PHASE_DIFF: "60 Hz phase difference, 0.1 us units, signed 24-bit",
    ADDR_LEBT_CHOPPER: "LEBT chopper beam parameters (opaque)",
    ADDR_PREVIOUS_PULSE: "previous beam pulse data (opaque)",
    ADDR_DAQ_MODE: "data acquisition mode (opaque)",
    ADDR_PROFILE_ID: "beam profile id (opaque)",
    ADDR_RF_GATES: "transmitter / rf gates on-off bitmask (opaque)",
    ADDR_TOD_LO: "time of day, seconds [23:0]",
    ADDR_RESET: "IOC remote reset address",
}
DEFAULT_LIST: tuple[int, ...] = tuple(sorted(DEFAULT_REGISTRY))


class RtdlError(ValueError):
    pass


class FramingError(RtdlError):
    pass


class IntegrityError(RtdlError):
    pass


class BroadcastOverrun(RtdlError):
    pass


@dataclass(frozen=True)
class RtdlFrame:
    address: int
    data: int

    def __post_init__(self):
        if not 0 <= self.address <= 0xFF:
            raise RtdlError(f"address {self.address} outside 0..255")
        if not 0 <= self.data <= MAX_DATA:
            raise RtdlError(f"data {self.data} does not fit in 24 bits")

    @property
    def checksum(self) -> int:
        d = self.data
        return self.address ^ (d >> 16) ^ ((d >> 8) & 0xFF) ^ (d & 0xFF)


def encode_frame(f: RtdlFrame) -> bytes:
    d = f.data
    return bytes((SYNC, f.address, d >> 16, (d >> 8) & 0xFF, d & 0xFF, f.checksum))


def decode_frame(raw: bytes) -> RtdlFrame:
    if len(raw) != FRAME_BYTES:
        raise FramingError(f"frame is {len(raw)} bytes, expected {FRAME_BYTES}")
    if raw[0] != SYNC:
        raise FramingError(f"bad sync byte 0x{raw[0]:02X}")
    frame = RtdlFrame(raw[1], (raw[2] << 16) | (raw[3] << 8) | raw[4])
    if frame.checksum != raw[5]:
        raise IntegrityError(f"checksum mismatch at address 0x{raw[1]:02X}: got 0x{raw[5]:02X}, want 0x{frame.checksum:02X}")
    return frame


def encode_frames(frames: Iterable[RtdlFrame]) -> bytes:
    return b"".join(encode_frame(f) for f in frames)


def decode_frames(raw: bytes) -> tuple[list[RtdlFrame], list[tuple[int, str]]]:
    """Decode a frame file; bad frames are dropped and reported as (offset, reason)."""
    frames, errors = [], []
    pos = 0
    while pos < len(raw):
        chunk = raw[pos : pos + FRAME_BYTES]
        try:
            frames.append(decode_frame(chunk))
        except IntegrityError as exc:
            errors.append((pos, str(exc)))
        except FramingError as exc:
            errors.append((pos, str(exc)))
            # hunt for the next sync byte
            nxt = raw.find(bytes((SYNC,)), pos + 1)
            if nxt < 0:
                break
            pos = nxt
            continue
        pos += FRAME_BYTES
    return frames, errors


# -- data encodings ---------------------------------------------------------------


def to_signed24(value: int) -> int:
    if not -(1 << 23) <= value < (1 << 23):
        raise RtdlError(f"{value} does not fit in signed 24 bits")
    return value & MAX_DATA


def from_signed24(data: int) -> int:
    return data - (1 << 24) if data & 0x800000 else data


def encode_phase_diff(deviation_ps: int) -> int:
    """Grid phase difference in 0.1 us steps (rounded), two's complement."""
    return to_signed24(round(deviation_ps / 100_000))


def split_tod(seconds: int) -> tuple[int, int]:
    if not 0 <= seconds < (1 << 32):
        raise RtdlError("time of day must fit in 32 bits")
    return seconds >> 24, seconds & MAX_DATA


def join_tod(hi: int, lo: int) -> int:
    return (hi << 24) | lo


# -- encoder list and broadcast ---------------------------------------------------


@dataclass
class EncoderList:
    addresses: Sequence[int] = DEFAULT_LIST
    registry: Mapping[int, str] = field(default_factory=lambda: dict(DEFAULT_REGISTRY))

    def __post_init__(self):
        self.addresses = tuple(self.addresses)
        seen = set()
        for a in self.addresses:
            if a not in self.registry:
                raise RtdlError(f"address 0x{a:02X} in encoder list is not registered")
            if a in seen:
                raise RtdlError(f"address 0x{a:02X} listed twice")
            seen.add(a)
        if len(self.registry) > 256:
            raise RtdlError("at most 256 frames can be defined")


def frame_duration_ps(bitrate: int) -> int:
    num = FRAME_BITS * PS_PER_S
    if num % bitrate:
        # keep back-to-back frame times exact; round each frame up
        return math.ceil(num / bitrate)
    return num // bitrate


def broadcast_duration_ps(n_frames: int, bitrate: int) -> int:
    return n_frames * frame_duration_ps(bitrate)


def broadcast_cycle(
    encoder: EncoderList,
    values: Mapping[int, int],
    at: int,
    cycle_start: int,
    bitrate: int = DEFAULT_BITRATE,
    source: str = "rtdl",
) -> list[TimedEvent]:
    """
    Frames of one broadcast, back to back from ``at``. Each event is stamped
    with the instant its last bit arrives; payload packs address << 24 | data.
    """
    missing = [a for a in encoder.addresses if a not in values]
    if missing:
        raise RtdlError("no value for listed address(es) " + ", ".join(f"0x{a:02X}" for a in missing))
    if at >= cycle_start and encoder.addresses:
        raise BroadcastOverrun(f"broadcast start {at} ps is not before Cycle Start {cycle_start} ps")
    dur = frame_duration_ps(bitrate)
    total = dur * len(encoder.addresses)
    if at + total >= cycle_start and encoder.addresses:
        raise BroadcastOverrun(
            f"RTDL broadcast of {len(encoder.addresses)} frames needs {total} ps but only "
            f"{cycle_start - at} ps remain before Cycle Start; required lead > {total} ps"
        )
    events = []
    for i, addr in enumerate(encoder.addresses):
        frame = RtdlFrame(addr, values[addr])
        events.append(TimedEvent(at + (i + 1) * dur, EventCode.RTDL_FRAME, (addr << 24) | frame.data, source))
    return events


def unpack_payload(payload: int) -> RtdlFrame:
    return RtdlFrame(payload >> 24, payload & MAX_DATA)


# -- time stamps ---------------------------------------------------------------


@dataclass(frozen=True)
class Timestamp:
    tod_seconds: int
    cycle_index: int
    fraction_ticks: int


class TimestampError(RuntimeError):
    pass


@dataclass
class CycleClock:
    """Time reference latched from the most recent TOD broadcast."""

    tod_seconds: Optional[int] = None
    cycle_index: Optional[int] = None
    t_cycle_start: Optional[int] = None
    ring_period: Optional[int] = None

    def latch(self, tod_seconds: int, cycle_index: int, t_cycle_start: int, ring_period: int) -> None:
        self.tod_seconds = tod_seconds
        self.cycle_index = cycle_index
        self.t_cycle_start = t_cycle_start
        self.ring_period = ring_period


def timestamp_now(clock: CycleClock, t: int) -> Timestamp:
    if clock.tod_seconds is None:
        raise TimestampError("no time reference: no TOD frames broadcast yet")
    # ticks of ring_period/16: floor((t - cs) * 16 / period)
    frac = ((t - clock.t_cycle_start) * 16) // clock.ring_period
    return Timestamp(clock.tod_seconds, clock.cycle_index, frac)
