"""Event-code registry shared by the engine and the event link."""

from enum import IntEnum


class EventCode(IntEnum):
    IDLE = 0x00
    CYCLE_START = 0x01
    RTDL_START = 0x02
    INJECTION_START = 0x03
    KLYSTRON_GATE = 0x04
    DIAG_PRETRIG = 0x05
    EXTRACTION = 0x06
    SYNC_LOST = 0x07
    END_CYCLE = 0x08
    # engine-internal; never put on the event link
    RTDL_FRAME = 0x20
    ZERO_CROSSING = 0x21


CHOPPER_GATE_CODES = range(0x10, 0x20)

# codes that may appear in an event-link frame
LINK_CODES = frozenset(
    [int(c) for c in EventCode if 0x01 <= c <= 0x08] + list(CHOPPER_GATE_CODES)
)
ENGINE_CODES = LINK_CODES | {int(EventCode.RTDL_FRAME), int(EventCode.ZERO_CROSSING)}


def code_name(code: int) -> str:
    if code in CHOPPER_GATE_CODES:
        return f"CHOPPER_GATE_{code - 0x10:X}"
    try:
        return EventCode(code).name
    except ValueError:
        return f"RESERVED_{code:02X}"


def is_link_code(code: int) -> bool:
    return code in LINK_CODES
