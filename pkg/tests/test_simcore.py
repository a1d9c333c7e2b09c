import io

import pytest
from hypothesis import given, strategies as st

from timingsim.codes import EventCode
from timingsim.simcore import Engine, SchedulingError, TimedEvent, read_event_log


def collect(engine):
    seen = []
    engine.subscribe(seen.append)
    return seen


def test_zero_delay_event_delivered_at_now():
    eng = Engine()
    seen = collect(eng)
    eng.post(0, EventCode.CYCLE_START)
    assert eng.run_until(0) == 1
    assert seen[0].at == 0


def test_event_in_past_rejected():
    eng = Engine()
    with pytest.raises(SchedulingError, match="event in past"):
        eng.post(-1, EventCode.CYCLE_START)


def test_same_instant_keeps_insertion_order():
    eng = Engine()
    seen = collect(eng)
    eng.post(5, EventCode.CYCLE_START, source="A")
    eng.post(5, EventCode.CYCLE_START, source="B")
    eng.run_until(5)
    assert [e.source for e in seen] == ["A", "B"]


def test_empty_queue_advances_time():
    eng = Engine()
    assert eng.run_until(10**12) == 0
    assert eng.now == 10**12


def test_run_until_is_inclusive():
    eng = Engine()
    for t in (1, 2, 3):
        eng.post(t, EventCode.CYCLE_START)
    assert eng.run_until(2) == 2
    assert eng.pending() == 1


def test_reentrant_scheduling():
    eng = Engine()
    seen = collect(eng)

    def chain(ev):
        if ev.at == 5:
            eng.post(7, EventCode.END_CYCLE)

    eng.subscribe(chain, [EventCode.CYCLE_START])
    eng.post(5, EventCode.CYCLE_START)
    assert eng.run_until(10) == 2
    assert [e.at for e in seen] == [5, 7]


def test_subscription_filter():
    eng = Engine()
    got = []
    eng.subscribe(got.append, [EventCode.EXTRACTION])
    eng.post(1, EventCode.CYCLE_START)
    eng.post(2, EventCode.EXTRACTION)
    eng.run_until(3)
    assert [e.code for e in got] == [EventCode.EXTRACTION]


def test_cancel():
    eng = Engine()
    h = eng.post(4, EventCode.CYCLE_START)
    assert h.cancel()
    assert eng.run_until(5) == 0
    assert eng.peek_time() is None


def test_float_time_rejected():
    with pytest.raises(TypeError):
        TimedEvent(1.5, EventCode.CYCLE_START)


def test_unregistered_code_rejected():
    with pytest.raises(ValueError):
        TimedEvent(0, 0x30)


def test_run_until_backwards_rejected():
    eng = Engine(start=100)
    with pytest.raises(SchedulingError):
        eng.run_until(99)


def test_log_round_trip():
    eng = Engine()
    eng.post(3, EventCode.CYCLE_START, 7, "mtg")
    eng.post(9, EventCode.RTDL_FRAME, None, "rtdl")
    eng.run_until(10)
    buf = io.StringIO()
    eng.write_log(buf)
    assert read_event_log(buf.getvalue().splitlines()) == eng.log


@given(st.lists(st.integers(0, 10**15), max_size=200))
def test_delivery_times_non_decreasing(times):
    eng = Engine()
    seen = collect(eng)
    for t in times:
        eng.post(t, EventCode.CYCLE_START)
    eng.run_until(10**15)
    at = [e.at for e in seen]
    assert at == sorted(at)
    assert len(at) == len(times)


@given(st.integers(1, 10**6), st.integers(1, 10**7))
def test_integer_time_sums_exactly(n, period):
    eng = Engine()
    t = 0
    for _ in range(min(n, 50)):
        t += period
    assert t == min(n, 50) * period
    eng.post(t, EventCode.CYCLE_START)
    eng.run_until(t)
    assert eng.log[0].at == min(n, 50) * period


@given(st.lists(st.tuples(st.integers(0, 1000), st.sampled_from(list(EventCode)[1:])), max_size=50))
def test_replay_is_identical(evs):
    def play():
        eng = Engine()
        for at, code in evs:
            eng.post(at, code)
        eng.run_until(1000)
        buf = io.StringIO()
        eng.write_log(buf)
        return buf.getvalue()

    assert play() == play()
